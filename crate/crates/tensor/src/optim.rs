use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    steps: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (id, g) in grads {
            let idx = id.index();
            let p = params.get_mut(*id).data_mut();
            let (m, v) =
                self.moments[idx].get_or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

/// Cosine decay from `base_lr` to zero over `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

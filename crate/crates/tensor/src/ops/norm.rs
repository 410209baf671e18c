use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics observed in a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving average update of running statistics.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, m) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

impl Tape {
    /// Batch normalisation over `[B,C,H,W]`.
    ///
    /// Train mode normalises with batch statistics and returns them; eval mode
    /// uses the supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, h, w) = self.value(x).dims4("batch_norm2d")?;
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return shape_err("batch_norm2d", format!("parameters must have length {c}"));
        }
        let hw = h * w;
        let count = b * hw;
        if mode == Mode::Train && count < 2 {
            return shape_err(
                "batch_norm2d",
                "training mode needs at least 2 values per channel",
            );
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for n in 0..b {
                        s += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for n in 0..b {
                        ss += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::new([b, c, h, w], out)?;
        let var = self.record("batch_norm2d", &[x, gamma, beta], out, move |args| {
            let g = args.grad;
            let gamma = args.inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = args.needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for n in 0..b {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = match mode {
                                Mode::Train => {
                                    let k = gamma[ch] * inv_std[ch] / count as f64;
                                    k * (count as f64 * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                }
                                Mode::Eval => g[i] * gamma[ch] * inv_std[ch],
                            };
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                args.needs[1].then_some(dgamma),
                args.needs[2].then_some(dbeta),
            ]
        });
        Ok((var, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor, gamma: f64, beta: f64) -> Tensor {
        let c = x.shape()[1];
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Tensor::full([c], gamma));
        let b = t.constant(Tensor::full([c], beta));
        let (y, _) = t
            .batch_norm2d(xv, g, b, &vec![0.0; c], &vec![1.0; c], Mode::Train, BN_EPS)
            .unwrap();
        t.value(y).clone()
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let y = run(Tensor::full([2, 1, 3, 3], 7.5), 1.0, 0.0);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let y = run(Tensor::from_fn([2, 2, 3, 3], |i| i as f64), 0.0, 5.0);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn running_stats_ema() {
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v, BN_MOMENTUM);
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }
}

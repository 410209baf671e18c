//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Elements probed per input; inputs at most this large are probed fully.
    pub max_probes: usize,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: 48,
            floor: 1e-3,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// SplitMix64; deterministic probe selection and projection weights.
pub fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1).
pub fn splitmix_unit(state: &mut u64) -> f64 {
    (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Reduce a tensor to a scalar with fixed pseudo-random weights, so every
/// output element carries a distinct cotangent.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut s = seed;
    let w = Tensor::from_fn(tape.shape(v).to_vec(), |_| splitmix_unit(&mut s));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Compare reverse-mode gradients of the scalar function `f` against central
/// differences, for the inputs flagged in `check`.
pub fn gradcheck<F>(
    name: &str,
    inputs: &[Tensor],
    check: &[bool],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| tape.leaf(t.clone(), c))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
    drop(tape);

    let mut rng = opts.seed;
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let n = input.numel();
        let probes: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            (0..opts.max_probes)
                .map(|_| (splitmix(&mut rng) % n as u64) as usize)
                .collect()
        };
        for j in probes {
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.probes += 1;
        }
    }
    Ok(report)
}

//! Cost volume to disparity: softmax over candidates, then expectation.

use evstereo_tensor::{Tape, Tensor, Var};

use crate::error::Result;

/// Per-pixel softmax over the candidate axis of `[B, D, H, W]`.
pub fn cost_to_prob(tape: &mut Tape, volume: Var) -> Result<Var> {
    tape.value(volume).dims4("cost_to_prob")?;
    Ok(tape.softmax(volume, 1)?)
}

/// `sum_d P(d) * d`, giving `[B, 1, H, W]` in level pixels.
pub fn soft_argmax(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (_, d, _, _) = tape.value(probs).dims4("soft_argmax")?;
    let cand = tape.constant(Tensor::from_fn([1, d, 1, 1], |i| i as f64));
    let weighted = tape.mul(probs, cand)?;
    Ok(tape.sum_axis(weighted, 1)?)
}

/// Bilinear resize by an integer factor, scaling values by the same factor
/// so they stay in pixels of the new grid.
pub fn upsample_disparity(tape: &mut Tape, disp: Var, factor: usize) -> Result<Var> {
    let (_, _, h, w) = tape.value(disp).dims4("upsample_disparity")?;
    if factor == 1 {
        return Ok(disp);
    }
    let up = tape.upsample_bilinear(disp, h * factor, w * factor)?;
    Ok(tape.scale(up, factor as f64))
}

/// Full-resolution disparity from one cost volume at `stride`.
pub fn volume_to_disparity(tape: &mut Tape, volume: Var, stride: usize) -> Result<Var> {
    let probs = cost_to_prob(tape, volume)?;
    let d = soft_argmax(tape, probs)?;
    upsample_disparity(tape, d, stride)
}

//! Dot-product correlation volumes over horizontal disparity candidates.

use evstereo_tensor::{Tape, Tensor, Var};

use crate::backbone::FeaturePyramid;
use crate::error::{invalid, Result};

/// Candidate count at a pyramid level: `ceil(D / stride)`.
pub fn level_candidates(max_disparity: usize, stride: usize) -> usize {
    max_disparity.div_ceil(stride)
}

/// `cost(b, d, h, w) = mean_c L(b, c, h, w) * R(b, c, h, w - d)`, zero where
/// `w - d < 0`. Returns the volume and a `[1, D, 1, W]` validity mask
/// (1 where `w - d >= 0`).
pub fn correlate(
    tape: &mut Tape,
    left: Var,
    right: Var,
    candidates: usize,
) -> Result<(Var, Tensor)> {
    if tape.shape(left) != tape.shape(right) {
        return invalid(format!(
            "correlate: left {:?} and right {:?} differ",
            tape.shape(left),
            tape.shape(right)
        ));
    }
    if candidates == 0 {
        return invalid("correlate: need at least one disparity candidate");
    }
    let (b, c, h, w) = tape.value(left).dims4("correlate")?;
    let (lv, rv) = (tape.value(left).data(), tape.value(right).data());
    let hw = h * w;
    let scale = 1.0 / c as f64;
    let mut out = vec![0.0; b * candidates * hw];
    for n in 0..b {
        for d in 0..candidates.min(w) {
            let dst = (n * candidates + d) * hw;
            for ch in 0..c {
                let src = (n * c + ch) * hw;
                for y in 0..h {
                    let row = src + y * w;
                    let o = dst + y * w;
                    for x in d..w {
                        out[o + x] += lv[row + x] * rv[row + x - d];
                    }
                }
            }
            for v in &mut out[dst..dst + hw] {
                *v *= scale;
            }
        }
    }
    let mask = Tensor::from_fn([1, candidates, 1, w], |i| {
        if i % w >= i / w {
            1.0
        } else {
            0.0
        }
    });
    let out = Tensor::new([b, candidates, h, w], out)?;
    let v = tape.record("correlate", &[left, right], out, move |args| {
        let (lv, rv) = (args.inputs[0].data(), args.inputs[1].data());
        let g = args.grad;
        let mut gl = args.needs[0].then(|| vec![0.0; lv.len()]);
        let mut gr = args.needs[1].then(|| vec![0.0; rv.len()]);
        for n in 0..b {
            for d in 0..candidates.min(w) {
                let go = (n * candidates + d) * hw;
                for ch in 0..c {
                    let src = (n * c + ch) * hw;
                    for y in 0..h {
                        let row = src + y * w;
                        let gr_row = go + y * w;
                        for x in d..w {
                            let gv = g[gr_row + x] * scale;
                            if let Some(gl) = gl.as_mut() {
                                gl[row + x] += gv * rv[row + x - d];
                            }
                            if let Some(gr) = gr.as_mut() {
                                gr[row + x - d] += gv * lv[row + x];
                            }
                        }
                    }
                }
            }
        }
        vec![gl, gr]
    });
    Ok((v, mask))
}

#[derive(Clone, Debug)]
pub struct CostVolumePyramid {
    /// Fine to coarse, `[B, D_s, H_s, W_s]`.
    pub volumes: Vec<Var>,
    pub candidates: Vec<usize>,
    pub strides: Vec<usize>,
    pub max_disparity: usize,
}

pub fn build_pyramid(
    tape: &mut Tape,
    left: &FeaturePyramid,
    right: &FeaturePyramid,
    max_disparity: usize,
) -> Result<CostVolumePyramid> {
    if left.levels.len() != right.levels.len() || left.strides != right.strides {
        return invalid(format!(
            "pyramid mismatch: {} vs {} levels",
            left.levels.len(),
            right.levels.len()
        ));
    }
    if max_disparity == 0 {
        return invalid("max disparity must be at least 1");
    }
    let mut volumes = Vec::with_capacity(left.levels.len());
    let mut candidates = Vec::with_capacity(left.levels.len());
    for ((&l, &r), &stride) in left.levels.iter().zip(&right.levels).zip(&left.strides) {
        let ds = level_candidates(max_disparity, stride);
        volumes.push(correlate(tape, l, r, ds)?.0);
        candidates.push(ds);
    }
    Ok(CostVolumePyramid {
        volumes,
        candidates,
        strides: left.strides.clone(),
        max_disparity,
    })
}

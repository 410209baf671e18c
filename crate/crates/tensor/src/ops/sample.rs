//! Pooling, bilinear resampling and disparity warping.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Source coordinate and blend weights for half-pixel-centred bilinear resizing.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tape {
    /// Max pooling with a square window; ties resolve to the first maximum.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("max_pool2d")?;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return shape_err(
                "max_pool2d",
                format!("window {kernel} stride {stride} on {h}x{w}"),
            );
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = (plane * h + oy * stride + ky) * w + ox * stride + kx;
                            if xv[i] > best {
                                best = xv[i];
                                at = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = at;
                }
            }
        }
        let n_in = xv.len();
        let out = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.record("max_pool2d", &[x], out, move |args| {
            let mut g = vec![0.0; n_in];
            for (o, &i) in arg.iter().enumerate() {
                g[i] += args.grad[o];
            }
            vec![Some(g)]
        }))
    }

    /// Bilinear resize of the spatial axes to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return shape_err("upsample_bilinear", "empty output size");
        }
        let ty = resize_taps(out_h, h);
        let tx = resize_taps(out_w, w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    out[(plane * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::new([b, c, out_h, out_w], out)?;
        Ok(self.record("upsample_bilinear", &[x], out, move |args| {
            let mut g = vec![0.0; b * c * h * w];
            for plane in 0..b * c {
                let dst = &mut g[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let go = args.grad[(plane * out_h + oy) * out_w + ox];
                        dst[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += go * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += go * ly * (1.0 - lx);
                        dst[y1 * w + x1] += go * ly * lx;
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Warp `x` horizontally by a per-pixel disparity: `out(h, w)` samples
    /// `x(h, w - d(h, w))` with linear interpolation. Sample positions outside
    /// the row are clamped to the border and reported as invalid in the
    /// returned `[B,1,H,W]` mask (1 valid, 0 invalid).
    pub fn grid_warp(&mut self, x: Var, disparity: Var) -> Result<(Var, Tensor)> {
        let (b, c, h, w) = self.value(x).dims4("grid_warp")?;
        if self.shape(disparity) != [b, 1, h, w] {
            return shape_err(
                "grid_warp",
                format!(
                    "disparity must be [{b},1,{h},{w}], got {:?}",
                    self.shape(disparity)
                ),
            );
        }
        let (xv, dv) = (self.value(x).data(), self.value(disparity).data());
        let hw = h * w;
        let mut taps = Vec::with_capacity(b * hw);
        let mut mask = vec![0.0; b * hw];
        for n in 0..b {
            for y in 0..h {
                for col in 0..w {
                    let p = n * hw + y * w + col;
                    let xs = col as f64 - dv[p];
                    let inside = xs >= 0.0 && xs <= (w - 1) as f64;
                    mask[p] = if inside { 1.0 } else { 0.0 };
                    let xc = xs.clamp(0.0, (w - 1) as f64);
                    let x0 = (xc.floor() as usize).min(w - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    taps.push((x0, x1, xc - x0 as f64, inside));
                }
            }
        }
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let plane = (n * c + ch) * hw;
                for y in 0..h {
                    for col in 0..w {
                        let (x0, x1, f, _) = taps[n * hw + y * w + col];
                        let row = plane + y * w;
                        out[row + col] = xv[row + x0] * (1.0 - f) + xv[row + x1] * f;
                    }
                }
            }
        }
        let out = Tensor::new([b, c, h, w], out)?;
        let v = self.record("grid_warp", &[x, disparity], out, move |args| {
            let xv = args.inputs[0].data();
            let g = args.grad;
            let mut gx = args.needs[0].then(|| vec![0.0; xv.len()]);
            let mut gd = args.needs[1].then(|| vec![0.0; b * hw]);
            for n in 0..b {
                for ch in 0..c {
                    let plane = (n * c + ch) * hw;
                    for y in 0..h {
                        for col in 0..w {
                            let (x0, x1, f, inside) = taps[n * hw + y * w + col];
                            let row = plane + y * w;
                            let go = g[row + col];
                            if let Some(gx) = gx.as_mut() {
                                gx[row + x0] += go * (1.0 - f);
                                gx[row + x1] += go * f;
                            }
                            if let Some(gd) = gd.as_mut() {
                                if inside {
                                    // d(out)/d(xs) = x1 - x0; xs = col - d.
                                    gd[n * hw + y * w + col] -= go * (xv[row + x1] - xv[row + x0]);
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gd]
        });
        Ok((v, Tensor::new([b, 1, h, w], mask)?))
    }
}

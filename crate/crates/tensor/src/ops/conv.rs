//! Dense and deformable 2-D convolution (cross-correlation) via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::ops::reduce::gemm;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride-1 params preserving spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: Conv2dParams,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }
    fn rows(&self) -> usize {
        self.c * self.taps()
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
    /// Nominal (unshifted) input coordinate of a tap.
    fn tap_origin(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (isize, isize) {
        let p = &self.p;
        (
            (oy * p.stride + ky * p.dilation) as isize - p.padding as isize,
            (ox * p.stride + kx * p.dilation) as isize - p.padding as isize,
        )
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.taps() + ky * g.kw + kx) * n;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                        cols[row + oy * g.ow + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.taps() + ky * g.kw + kx) * n;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear corners of `(y, x)`: `[(flat index, weight, dw/dy, dw/dx)]`,
/// skipping corners that fall outside the `h x w` plane (zero contribution).
fn bilinear_corners(
    y: f64,
    x: f64,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, f64, f64, f64)> {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as isize, x0 as isize);
    [
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ]
    .into_iter()
    .filter(move |&(cy, cx, ..)| cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w)
    .map(move |(cy, cx, wt, dy, dx)| (cy as usize * w + cx as usize, wt, dy, dx))
}

/// Sampling position of tap `k` at output pixel `p` for sample-local offsets.
fn deform_position(g: &Geometry, off: &[f64], k: usize, oy: usize, ox: usize) -> (f64, f64) {
    let n = g.cols();
    let (ky, kx) = (k / g.kw, k % g.kw);
    let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
    let p = oy * g.ow + ox;
    (
        iy as f64 + off[2 * k * n + p],
        ix as f64 + off[(2 * k + 1) * n + p],
    )
}

fn deform_im2col(x: &[f64], off: &[f64], g: &Geometry, cols: &mut [f64]) {
    let n = g.cols();
    let plane = g.h * g.w;
    for k in 0..g.taps() {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y, xx) = deform_position(g, off, k, oy, ox);
                let p = oy * g.ow + ox;
                let corners: Vec<_> = bilinear_corners(y, xx, g.h, g.w).collect();
                for c in 0..g.c {
                    let xc = &x[c * plane..(c + 1) * plane];
                    let mut v = 0.0;
                    for &(i, wt, _, _) in &corners {
                        v += wt * xc[i];
                    }
                    cols[(c * g.taps() + k) * n + p] = v;
                }
            }
        }
    }
}

/// Scatter column gradients back to the input and offsets.
fn deform_col2im(
    x: &[f64],
    off: &[f64],
    dcols: &[f64],
    g: &Geometry,
    dx: Option<&mut [f64]>,
    doff: Option<&mut [f64]>,
) {
    let n = g.cols();
    let plane = g.h * g.w;
    let mut dx = dx;
    let mut doff = doff;
    for k in 0..g.taps() {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y, xx) = deform_position(g, off, k, oy, ox);
                let p = oy * g.ow + ox;
                let (mut gy, mut gx) = (0.0, 0.0);
                for (i, wt, dwy, dwx) in bilinear_corners(y, xx, g.h, g.w) {
                    for c in 0..g.c {
                        let gc = dcols[(c * g.taps() + k) * n + p];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * plane + i] += gc * wt;
                        }
                        let v = x[c * plane + i];
                        gy += gc * dwy * v;
                        gx += gc * dwx * v;
                    }
                }
                if let Some(doff) = doff.as_deref_mut() {
                    doff[2 * k * n + p] += gy;
                    doff[(2 * k + 1) * n + p] += gx;
                }
            }
        }
    }
}

fn geometry(
    op: &'static str,
    xs: &[usize],
    ws: &[usize],
    bias: Option<&[usize]>,
    p: Conv2dParams,
) -> Result<(usize, usize, Geometry)> {
    let [b, c, h, w] = xs[..] else {
        return shape_err(op, format!("input must be [B,C,H,W], got {xs:?}"));
    };
    let [o, wc, kh, kw] = ws[..] else {
        return shape_err(op, format!("weight must be [O,C,kh,kw], got {ws:?}"));
    };
    if wc != c {
        return shape_err(
            op,
            format!("input has {c} channels but weight expects {wc}"),
        );
    }
    if let Some(bs) = bias {
        if bs != [o] {
            return shape_err(op, format!("bias must be [{o}], got {bs:?}"));
        }
    }
    let (Some(oh), Some(ow)) = (p.output_len(h, kh), p.output_len(w, kw)) else {
        return shape_err(
            op,
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with {p:?}"),
        );
    };
    Ok((
        b,
        o,
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            p,
        },
    ))
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (o, &bv) in bias.iter().enumerate() {
        for v in &mut out[o * n..(o + 1) * n] {
            *v += bv;
        }
    }
}

fn bias_grad(grad: &[f64], b: usize, o: usize, n: usize) -> Vec<f64> {
    let mut gb = vec![0.0; o];
    for s in 0..b {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let base = (s * o + oc) * n;
            *acc += grad[base..base + n].iter().sum::<f64>();
        }
    }
    gb
}

impl Tape {
    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        p: Conv2dParams,
    ) -> Result<Var> {
        let bias_shape = bias.map(|b| self.shape(b).to_vec());
        let (b, o, g) = geometry(
            "conv2d",
            self.shape(x),
            self.shape(weight),
            bias_shape.as_deref(),
            p,
        )?;
        let (xv, wv) = (self.value(x).data(), self.value(weight).data());
        let (rows, n) = (g.rows(), g.cols());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![0.0; b * o * n];
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * n }];
        for s in 0..b {
            let xs = &xv[s * in_len..(s + 1) * in_len];
            let colv: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let os = &mut out[s * o * n..(s + 1) * o * n];
            gemm(o, rows, n, wv, false, colv, false, 0.0, os);
            if let Some(bv) = bias {
                add_bias(os, self.value(bv).data(), n);
            }
        }
        let out = Tensor::new([b, o, g.oh, g.ow], out)?;
        let inputs: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.record("conv2d", &inputs, out, move |args| {
            let (xv, wv, grad) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
            let mut gx = args.needs[0].then(|| vec![0.0; xv.len()]);
            let mut gw = args.needs[1].then(|| vec![0.0; wv.len()]);
            let mut cols = vec![0.0; rows * n];
            for s in 0..b {
                let gs = &grad[s * o * n..(s + 1) * o * n];
                if let Some(gw) = gw.as_mut() {
                    let xs = &xv[s * in_len..(s + 1) * in_len];
                    let colv: &[f64] = if g.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &g, &mut cols);
                        &cols
                    };
                    gemm(o, n, rows, gs, false, colv, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dxs = &mut gx[s * in_len..(s + 1) * in_len];
                    if g.is_pointwise() {
                        gemm(rows, o, n, wv, true, gs, false, 1.0, dxs);
                    } else {
                        gemm(rows, o, n, wv, true, gs, false, 0.0, &mut cols);
                        col2im(&cols, &g, dxs);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if args.inputs.len() == 3 {
                res.push(args.needs[2].then(|| bias_grad(grad, b, o, n)));
            }
            res
        }))
    }

    /// Deformable 2-D convolution. `offsets` is `[B, 2*kh*kw, H', W']` holding a
    /// `(dy, dx)` pair per kernel tap; taps sample the input bilinearly and
    /// sampling corners outside the image contribute zero.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        weight: Var,
        bias: Option<Var>,
        p: Conv2dParams,
    ) -> Result<Var> {
        let bias_shape = bias.map(|b| self.shape(b).to_vec());
        let (b, o, g) = geometry(
            "deform_conv2d",
            self.shape(x),
            self.shape(weight),
            bias_shape.as_deref(),
            p,
        )?;
        let expected = [b, 2 * g.taps(), g.oh, g.ow];
        if self.shape(offsets) != expected {
            return shape_err(
                "deform_conv2d",
                format!(
                    "offsets must be {expected:?}, got {:?}",
                    self.shape(offsets)
                ),
            );
        }
        let (xv, ov, wv) = (
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(weight).data(),
        );
        let (rows, n) = (g.rows(), g.cols());
        let in_len = g.c * g.h * g.w;
        let off_len = 2 * g.taps() * n;
        let mut out = vec![0.0; b * o * n];
        let mut cols = vec![0.0; rows * n];
        for s in 0..b {
            deform_im2col(
                &xv[s * in_len..(s + 1) * in_len],
                &ov[s * off_len..(s + 1) * off_len],
                &g,
                &mut cols,
            );
            let os = &mut out[s * o * n..(s + 1) * o * n];
            gemm(o, rows, n, wv, false, &cols, false, 0.0, os);
            if let Some(bv) = bias {
                add_bias(os, self.value(bv).data(), n);
            }
        }
        let out = Tensor::new([b, o, g.oh, g.ow], out)?;
        let inputs: Vec<Var> = [x, offsets, weight].into_iter().chain(bias).collect();
        Ok(self.record("deform_conv2d", &inputs, out, move |args| {
            let (xv, ov, wv, grad) = (
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.inputs[2].data(),
                args.grad,
            );
            let mut gx = args.needs[0].then(|| vec![0.0; xv.len()]);
            let mut goff = args.needs[1].then(|| vec![0.0; ov.len()]);
            let mut gw = args.needs[2].then(|| vec![0.0; wv.len()]);
            let mut cols = vec![0.0; rows * n];
            for s in 0..b {
                let xs = &xv[s * in_len..(s + 1) * in_len];
                let os = &ov[s * off_len..(s + 1) * off_len];
                let gs = &grad[s * o * n..(s + 1) * o * n];
                if let Some(gw) = gw.as_mut() {
                    deform_im2col(xs, os, &g, &mut cols);
                    gemm(o, n, rows, gs, false, &cols, true, 1.0, gw);
                }
                if gx.is_some() || goff.is_some() {
                    gemm(rows, o, n, wv, true, gs, false, 0.0, &mut cols);
                    deform_col2im(
                        xs,
                        os,
                        &cols,
                        &g,
                        gx.as_mut().map(|v| &mut v[s * in_len..(s + 1) * in_len]),
                        goff.as_mut()
                            .map(|v| &mut v[s * off_len..(s + 1) * off_len]),
                    );
                }
            }
            let mut res = vec![gx, goff, gw];
            if args.inputs.len() == 4 {
                res.push(args.needs[3].then(|| bias_grad(grad, b, o, n)));
            }
            res
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 1, 3, 3]));
        let w = t.constant(Tensor::ones([1, 1, 3, 3]));
        let y = t.conv2d(x, w, None, Conv2dParams::default()).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut t = Tape::new();
        let data = Tensor::from_fn([2, 1, 4, 5], |i| (i as f64).sin());
        let x = t.constant(data.clone());
        let w = t.constant(Tensor::ones([1, 1, 1, 1]));
        let y = t.conv2d(x, w, None, Conv2dParams::default()).unwrap();
        assert_eq!(t.value(y), &data);
    }

    #[test]
    fn output_size_formula() {
        let p = Conv2dParams::new(2, 1, 1);
        assert_eq!(p.output_len(64, 3), Some(32));
        assert_eq!(Conv2dParams::new(1, 0, 1).output_len(2, 3), None);
        assert_eq!(Conv2dParams::same(3, 4).output_len(16, 3), Some(16));
    }

    #[test]
    fn channel_mismatch_is_descriptive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 2, 3, 3]));
        let w = t.constant(Tensor::ones([1, 3, 3, 3]));
        let err = t
            .conv2d(x, w, None, Conv2dParams::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn deform_rejects_bad_offsets() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 1, 4, 4]));
        let off = t.constant(Tensor::zeros([1, 9, 4, 4]));
        let w = t.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(t
            .deform_conv2d(x, off, w, None, Conv2dParams::same(3, 1))
            .is_err());
    }
}

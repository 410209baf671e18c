use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

type BinFn = fn(f64, f64) -> f64;

impl Tape {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: BinFn,
        dfa: BinFn,
        dfb: BinFn,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(out_shape) = broadcast_shape(&sa, &sb) else {
            return shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}"));
        };
        let ma = (sa != out_shape).then(|| index_map(&out_shape, &sa));
        let mb = (sb != out_shape).then(|| index_map(&out_shape, &sb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = va[ma.as_ref().map_or(i, |m| m[i])];
                let y = vb[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(op, &[a, b], out, move |args| {
            let (va, vb) = (args.inputs[0].data(), args.inputs[1].data());
            let mut ga = args.needs[0].then(|| vec![0.0; va.len()]);
            let mut gb = args.needs[1].then(|| vec![0.0; vb.len()]);
            for (i, &g) in args.grad.iter().enumerate() {
                let ia = ma.as_ref().map_or(i, |m| m[i]);
                let ib = mb.as_ref().map_or(i, |m| m[i]);
                let (x, y) = (va[ia], vb[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g * dfa(x, y);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g * dfb(x, y);
                }
            }
            vec![ga, gb]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.record(op, &[x], out, move |args| {
            let xs = args.inputs[0].data();
            let ys = args.output.data();
            let g = args
                .grad
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| v.max(0.0),
            |v, _| if v > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |v, _| {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            },
        )
    }

    /// `elu(x) + 1`, a strictly positive feature map.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        self.unary(
            "elu_plus_one",
            x,
            |v| if v > 0.0 { v + 1.0 } else { v.exp() },
            |v, y| if v > 0.0 { 1.0 } else { y },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary("log", x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary("neg", x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary("add_scalar", x, move |v| v + s, |_, _| 1.0)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            "clamp",
            x,
            move |v| v.clamp(lo, hi),
            move |v, _| if v < lo || v > hi { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise smooth-L1 (Huber with elbow `beta`) of a residual.
    pub fn smooth_l1(&mut self, r: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(crate::TensorError::InvalidArgument {
                op: "smooth_l1",
                msg: format!("beta must be positive, got {beta}"),
            });
        }
        Ok(self.unary(
            "smooth_l1",
            r,
            move |v| smooth_l1(v, beta),
            move |v, _| if v.abs() < beta { v / beta } else { v.signum() },
        ))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    let a = r.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

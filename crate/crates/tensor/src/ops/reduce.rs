use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{check_axis, Tensor};

/// `c = beta * c + op(a) * op(b)` for row-major slices, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a)
            .expect("gemm a")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b)
            .expect("gemm b")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.record("sum", &[x], Tensor::scalar(s), |args| {
            vec![Some(vec![args.grad[0]; args.inputs[0].numel()])]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the elements where `mask` is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x).data();
        if mask.len() != v.len() {
            return shape_err(
                "masked_mean",
                format!("mask has {} entries, tensor {}", mask.len(), v.len()),
            );
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "masked_mean",
                msg: "mask selects no elements".into(),
            });
        }
        let s: f64 = v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
        let mask = mask.to_vec();
        let inv = 1.0 / count as f64;
        Ok(
            self.record("masked_mean", &[x], Tensor::scalar(s * inv), move |args| {
                let g = args.grad[0] * inv;
                vec![Some(
                    mask.iter().map(|&m| if m { g } else { 0.0 }).collect(),
                )]
            }),
        )
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.record("sum_axis", &[x], out, move |args| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    g[base..base + inner].copy_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| v[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (v[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.record("softmax", &[x], out, move |args| {
            let y = args.output.data();
            let g = args.grad;
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record("reshape", &[x], out, |args| vec![Some(args.grad.to_vec())]))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let [b, m, n] = self.shape(x)[..] else {
            return shape_err(
                "transpose_last2",
                format!("expected rank 3, got {:?}", self.shape(x)),
            );
        };
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        transpose_batched(v, &mut out, b, m, n);
        let out = Tensor::new([b, n, m], out)?;
        Ok(self.record("transpose", &[x], out, move |args| {
            let mut g = vec![0.0; args.grad.len()];
            transpose_batched(args.grad, &mut g, b, n, m);
            vec![Some(g)]
        }))
    }

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, m, k], &[bb, k2, n]) = (&sa[..], &sb[..]) else {
            return shape_err(
                "bmm",
                format!("expected rank-3 operands, got {sa:?} and {sb:?}"),
            );
        };
        if ba != bb || k != k2 {
            return shape_err("bmm", format!("incompatible {sa:?} x {sb:?}"));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new([ba, m, n], out)?;
        Ok(self.record("bmm", &[a, b], out, move |args| {
            let (va, vb, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
            let ga = args.needs[0].then(|| {
                let mut ga = vec![0.0; va.len()];
                for i in 0..ba {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &vb[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = args.needs[1].then(|| {
                let mut gb = vec![0.0; vb.len()];
                for i in 0..ba {
                    gemm(
                        k,
                        m,
                        n,
                        &va[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// 2-D matrix product `[M,K] x [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(
                "matmul",
                format!("expected matrices, got {sa:?} and {sb:?}"),
            );
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "nothing to concatenate");
        };
        let base = self.shape(first).to_vec();
        check_axis(axis, base.len())?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", s, base),
                );
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let v = self.value(x).data();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.record("concat", xs, out, move |args| {
            let mut grads: Vec<Vec<f64>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut at = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&args.grad[at..at + len * inner]);
                    at += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&args.needs)
                .map(|(g, &n)| n.then_some(g))
                .collect()
        }))
    }
}

fn transpose_batched(src: &[f64], dst: &mut [f64], b: usize, m: usize, n: usize) {
    for i in 0..b {
        let (s, d) = (
            &src[i * m * n..(i + 1) * m * n],
            &mut dst[i * m * n..(i + 1) * m * n],
        );
        for r in 0..m {
            for c in 0..n {
                d[c * m + r] = s[r * n + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([4], 3.0));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_bad_axis() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 2]));
        assert!(matches!(
            t.softmax(x, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn matmul_small() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn concat_channels() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full([2, 1, 2], 1.0));
        let b = t.constant(Tensor::full([2, 2, 2], 2.0));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(
            t.value(c).data(),
            &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
    }

    #[test]
    fn masked_mean_ignores_masked() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([3], vec![1.0, 100.0, 3.0]).unwrap());
        let m = t.masked_mean(x, &[true, false, true]).unwrap();
        assert_eq!(t.value(m).item(), Some(2.0));
        assert!(t.masked_mean(x, &[false; 3]).is_err());
    }
}

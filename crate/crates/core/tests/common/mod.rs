#![allow(dead_code)]

use evstereo_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn at(t: &Tensor, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        0.5 * r * r / beta
    } else {
        r.abs() - 0.5 * beta
    }
}

/// Channel-mean correlation by four nested loops; zero where `x < d`.
pub fn correlation_oracle(l: &Tensor, r: &Tensor, d: usize) -> Tensor {
    let [b, c, h, w] = l.shape()[..] else {
        panic!("rank")
    };
    let mut out = Tensor::zeros([b, d, h, w]);
    for n in 0..b {
        for k in 0..d {
            for y in 0..h {
                for x in k..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += at(l, n, ch, y, x) * at(r, n, ch, y, x - k);
                    }
                    out.data_mut()[((n * d + k) * h + y) * w + x] = acc / c as f64;
                }
            }
        }
    }
    out
}

/// Attention with the explicit N x N similarity matrix and `elu + 1` features.
pub fn quadratic_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let s = q.shape().to_vec();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let tok = |t: &Tensor, bi: usize, i: usize, ch: usize| t.data()[(bi * c + ch) * n + i];
    let mut out = vec![0.0; q.numel()];
    for bi in 0..b {
        for i in 0..n {
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for j in 0..n {
                let sim: f64 = (0..c)
                    .map(|ch| phi(tok(q, bi, i, ch)) * phi(tok(k, bi, j, ch)))
                    .sum();
                den += sim;
                for ch in 0..c {
                    num[ch] += sim * tok(v, bi, j, ch);
                }
            }
            for ch in 0..c {
                out[(bi * c + ch) * n + i] = num[ch] / den;
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

pub fn log_gauss(x: f64, mu: f64, var: f64) -> f64 {
    -(x - mu).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

pub fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive(f, a, b, fa, fm, fb, whole, eps, depth)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Divergence of the prediction from the target, target density weighting
/// the log ratio, by quadrature over +-14 target deviations.
pub fn gaussian_divergence_numeric(mu: f64, var: f64, mu_g: f64, var_g: f64) -> f64 {
    let integrand = |x: f64| {
        let lq = log_gauss(x, mu_g, var_g);
        lq.exp() * (lq - log_gauss(x, mu, var))
    };
    let sg = var_g.sqrt();
    simpson(&integrand, mu_g - 14.0 * sg, mu_g + 14.0 * sg, 1e-9, 18)
}

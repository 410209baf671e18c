use evstereo_core::cost_volume::{correlate, level_candidates};
use evstereo_core::disparity::{cost_to_prob, soft_argmax, upsample_disparity};
use evstereo_core::loss::kl_gaussian_closed_form;
use evstereo_core::refine::linear_attention;
use evstereo_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{at, correlation_oracle, gaussian_divergence_numeric, quadratic_attention, random};

#[test]
fn correlation_matches_four_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(b, c, h, w, d) in &[(2, 3, 4, 9, 5), (1, 8, 3, 4, 7), (1, 1, 1, 1, 1)] {
        let l = random(&[b, c, h, w], &mut rng);
        let r = random(&[b, c, h, w], &mut rng);
        let mut tape = Tape::new();
        let (lv, rv) = (tape.constant(l.clone()), tape.constant(r.clone()));
        let (vol, mask) = correlate(&mut tape, lv, rv, d).unwrap();
        let vol = tape.value(vol);
        assert_eq!(vol.shape(), &[b, d, h, w]);
        let worst = vol.max_abs_diff(&correlation_oracle(&l, &r, d));
        for k in 0..d {
            for x in 0..w {
                assert_eq!(mask.data()[k * w + x], f64::from(u8::from(x >= k)));
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }
}

#[test]
fn candidates_round_up() {
    assert_eq!(level_candidates(32, 4), 8);
    assert_eq!(level_candidates(33, 4), 9);
    assert_eq!(level_candidates(32, 16), 2);
    assert_eq!(level_candidates(1, 16), 1);
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = linear_attention(&mut tape, qv, kv, vv).unwrap();
    tape.value(out).clone()
}

#[test]
fn linear_attention_matches_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for shape in [[2, 4, 3, 5], [1, 6, 4, 4], [1, 3, 2, 1]] {
        let (q, k, v) = (
            random(&shape, &mut rng),
            random(&shape, &mut rng),
            random(&shape, &mut rng),
        );
        let diff = run_attention(&q, &k, &v).max_abs_diff(&quadratic_attention(&q, &k, &v));
        assert!(diff < 1e-8, "{shape:?}: {diff}");
    }
}

#[test]
fn single_token_attention_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [1, 5, 1, 1];
    let (q, k, v) = (
        random(&shape, &mut rng),
        random(&shape, &mut rng),
        random(&shape, &mut rng),
    );
    assert!(run_attention(&q, &k, &v).max_abs_diff(&v) < 1e-12);
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [1, 3, 2, 4];
    let q = random(&shape, &mut rng);
    let key: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k = Tensor::from_fn(shape, |i| key[i / 8]);
    let v = random(&shape, &mut rng);
    let out = run_attention(&q, &k, &v);
    for ch in 0..3 {
        let mean = v.data()[ch * 8..ch * 8 + 8].iter().sum::<f64>() / 8.0;
        for i in 0..8 {
            assert!((out.data()[ch * 8 + i] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_and_soft_argmax_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, d, h, w) = (2, 6, 3, 4);
    let cost = random(&[b, d, h, w], &mut rng).map(|x| 8.0 * x);
    let mut tape = Tape::new();
    let c = tape.constant(cost.clone());
    let p = cost_to_prob(&mut tape, c).unwrap();
    let e = soft_argmax(&mut tape, p).unwrap();
    let (p, e) = (tape.value(p).clone(), tape.value(e).clone());
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let col: Vec<f64> = (0..d).map(|k| at(&cost, n, k, y, x)).collect();
                let m = col.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
                let mut expect = 0.0;
                for k in 0..d {
                    let pk = (col[k] - m).exp() / z;
                    assert!((at(&p, n, k, y, x) - pk).abs() < 1e-12);
                    expect += k as f64 * pk;
                }
                assert!((at(&e, n, 0, y, x) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_hot_volume_gives_its_index_scaled_by_stride() {
    let (d, h, w) = (5, 2, 3);
    let cost = Tensor::from_fn([1, d, h, w], |i| if i / (h * w) == 3 { 80.0 } else { 0.0 });
    let mut tape = Tape::new();
    let c = tape.constant(cost);
    let p = cost_to_prob(&mut tape, c).unwrap();
    let e = soft_argmax(&mut tape, p).unwrap();
    let up = upsample_disparity(&mut tape, e, 4).unwrap();
    assert_eq!(tape.shape(up), &[1, 1, 8, 12]);
    for &v in tape.value(up).data() {
        assert!((v - 12.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn gaussian_divergence_closed_form_matches_quadrature() {
    for &sg in &[0.5, 1.0, 2.0] {
        for &(mu, s, mu_g) in &[(0.0, 1.0, 0.0), (1.5, 0.7, -0.3), (-2.0, 3.0, 1.0)] {
            let (var, var_g) = (s * s, sg * sg);
            let numeric = gaussian_divergence_numeric(mu, var, mu_g, var_g);
            let closed = kl_gaussian_closed_form(mu, var, mu_g, var_g);
            assert!(
                (numeric - closed).abs() < 1e-4,
                "sg {sg} mu {mu} s {s}: {numeric} vs {closed}"
            );
        }
    }
}

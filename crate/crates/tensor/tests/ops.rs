use evstereo_tensor::gradcheck::{gradcheck, project, GradCheckOptions};
use evstereo_tensor::{checkpoint, Conv2dParams, Mode, Tape, Tensor, BN_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops over the definition of cross-correlation.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], p: Conv2dParams) -> Tensor {
    let (n, c, h, wd) = x.dims4("oracle").unwrap();
    let (o, _, kh, kw) = w.dims4("oracle").unwrap();
    let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
    let ow = (wd + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy =
                                    (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix =
                                    (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in [
        Conv2dParams::default(),
        Conv2dParams::new(1, 1, 1),
        Conv2dParams::new(2, 1, 1),
        Conv2dParams::new(1, 2, 2),
    ] {
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (
            t.constant(x.clone()),
            t.constant(w.clone()),
            t.constant(b.clone()),
        );
        let y = t.conv2d(xv, wv, Some(bv), p).unwrap();
        let expected = conv_oracle(&x, &w, b.data(), p);
        assert_eq!(t.shape(y), expected.shape());
        assert!(t.value(y).max_abs_diff(&expected) < 1e-12, "{p:?}");
    }
}

#[test]
fn deform_zero_offsets_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in [
        Conv2dParams::same(3, 1),
        Conv2dParams::new(2, 1, 1),
        Conv2dParams::same(3, 2),
    ] {
        let x = random(&[2, 3, 7, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(xv, wv, Some(bv), p).unwrap();
        let [n, _, oh, ow] = t.shape(y)[..] else {
            unreachable!()
        };
        let off = t.constant(Tensor::zeros([n, 18, oh, ow]));
        let yd = t.deform_conv2d(xv, off, wv, Some(bv), p).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(yd)) <= 1e-10);
    }
}

#[test]
fn deform_unit_row_offset_equals_shifted_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (8, 7);
    let x = random(&[1, 2, h, w], &mut rng);
    let wt = random(&[3, 2, 3, 3], &mut rng);
    // shifted(y) = x(y + 1)
    let shifted = Tensor::from_fn([1, 2, h, w], |i| {
        let (plane, rest) = (i / (h * w), i % (h * w));
        let (y, col) = (rest / w, rest % w);
        if y + 1 < h {
            x.data()[plane * h * w + (y + 1) * w + col]
        } else {
            0.0
        }
    });
    let offsets = Tensor::from_fn([1, 18, h, w], |i| {
        if (i / (h * w)) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    });
    let p = Conv2dParams::same(3, 1);
    let mut t = Tape::new();
    let (xv, wv, ov, sv) = (
        t.constant(x),
        t.constant(wt),
        t.constant(offsets),
        t.constant(shifted),
    );
    let yd = t.deform_conv2d(xv, ov, wv, None, p).unwrap();
    let yc = t.conv2d(sv, wv, None, p).unwrap();
    let (a, b) = (t.value(yd), t.value(yc));
    for o in 0..3 {
        for y in 1..h - 2 {
            for col in 1..w - 1 {
                let i = (o * h + y) * w + col;
                assert!((a.data()[i] - b.data()[i]).abs() < 1e-12, "({o},{y},{col})");
            }
        }
    }
}

#[test]
fn batchnorm_train_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn([3, 4, 5, 5], |_| rng.gen_range(-3.0..7.0));
    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::ones([4]));
    let b = t.constant(Tensor::zeros([4]));
    let (y, stats) = t
        .batch_norm2d(xv, g, b, &[0.0; 4], &[1.0; 4], Mode::Train, BN_EPS)
        .unwrap();
    assert!(stats.is_some());
    let y = t.value(y);
    for c in 0..4 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| y.data()[(n * 4 + c) * 25..(n * 4 + c + 1) * 25].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 9, 9], &mut rng);
    let w = random(&[5, 3, 3, 3], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, None, Conv2dParams::new(2, 1, 1)).unwrap();
        let y = t.relu(y);
        let y = t.upsample_bilinear(y, 9, 9).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

// ---- finite-difference checks ------------------------------------------

const TOL: f64 = 1e-4;

fn assert_grad<F>(name: &str, inputs: &[Tensor], check: &[bool], f: F)
where
    F: Fn(&mut Tape, &[evstereo_tensor::Var]) -> evstereo_tensor::Result<evstereo_tensor::Var>,
{
    let r = gradcheck(name, inputs, check, &GradCheckOptions::default(), f).unwrap();
    assert!(
        r.passed(TOL),
        "{name}: max rel err {:e} abs {:e}",
        r.max_rel_error,
        r.max_abs_error
    );
    assert!(r.probes > 0);
}

#[test]
fn gradcheck_conv2d_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (xs, ws, p) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], Conv2dParams::same(3, 1)),
        ([2, 3, 6, 4], [2, 3, 3, 3], Conv2dParams::new(2, 1, 1)),
        ([1, 4, 7, 7], [2, 4, 1, 1], Conv2dParams::default()),
    ] {
        let inputs = vec![
            random(&xs, &mut rng),
            random(&ws, &mut rng),
            random(&[ws[0]], &mut rng),
        ];
        assert_grad("conv2d", &inputs, &[true; 3], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
            project(t, y, 7)
        });
    }
}

#[test]
fn gradcheck_deform_conv2d_including_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (xs, o, p) in [
        ([1, 2, 5, 5], 3, Conv2dParams::same(3, 1)),
        ([2, 2, 6, 6], 2, Conv2dParams::new(2, 1, 1)),
        ([1, 3, 4, 5], 2, Conv2dParams::same(3, 2)),
    ] {
        let oh = p.output_len(xs[2], 3).unwrap();
        let ow = p.output_len(xs[3], 3).unwrap();
        // Keep sampling positions away from integer grid lines, where the
        // bilinear kernel is not differentiable.
        let off = Tensor::from_fn([xs[0], 18, oh, ow], |_| {
            rng.gen_range(0.15..0.85) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
        });
        let inputs = vec![
            random(&xs, &mut rng),
            off,
            random(&[o, xs[1], 3, 3], &mut rng),
            random(&[o], &mut rng),
        ];
        assert_grad("deform_conv2d", &inputs, &[true; 4], |t, v| {
            let y = t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), p)?;
            project(t, y, 8)
        });
    }
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (shape, mode) in [
        ([2, 3, 4, 4], Mode::Train),
        ([1, 2, 3, 5], Mode::Train),
        ([2, 2, 3, 3], Mode::Eval),
    ] {
        let c = shape[1];
        let inputs = vec![
            random(&shape, &mut rng),
            random(&[c], &mut rng),
            random(&[c], &mut rng),
        ];
        assert_grad("batch_norm2d", &inputs, &[true; 3], |t, v| {
            let (y, _) =
                t.batch_norm2d(v[0], v[1], v[2], &vec![0.1; c], &vec![1.3; c], mode, BN_EPS)?;
            project(t, y, 9)
        });
    }
}

#[test]
fn gradcheck_composite_conv_bn_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![
        random(&[2, 2, 5, 5], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[3], &mut rng),
    ];
    assert_grad("conv-bn-relu", &inputs, &[true; 4], |t, v| {
        let y = t.conv2d(v[0], v[1], None, Conv2dParams::same(3, 1))?;
        let (y, _) = t.batch_norm2d(y, v[2], v[3], &[0.0; 3], &[1.0; 3], Mode::Train, BN_EPS)?;
        let y = t.relu(y);
        let s = t.sum(y);
        let y2 = t.mul(y, y)?;
        let q = t.sum(y2);
        t.add(s, q)
    });
}

#[test]
fn gradcheck_grid_warp_input_and_disparity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in [[1, 2, 4, 8], [2, 1, 3, 6], [1, 3, 5, 7]] {
        let [b, _, h, w] = shape;
        // Sample positions strictly inside the row and off the integer grid.
        let _ = h;
        let disp = Tensor::from_fn([b, 1, h, w], |i| {
            let col = (i % w) as f64;
            let source = rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.1..0.9);
            col - source
        });
        let inputs = vec![random(&shape, &mut rng), disp];
        assert_grad("grid_warp", &inputs, &[true, true], |t, v| {
            let (y, _) = t.grid_warp(v[0], v[1])?;
            project(t, y, 10)
        });
    }
}

#[test]
fn gradcheck_pointwise_and_resampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shape in [[1, 2, 4, 4], [2, 3, 3, 5], [1, 1, 6, 2]] {
        let x = random(&shape, &mut rng);
        assert_grad(
            "silu/sigmoid/elu",
            std::slice::from_ref(&x),
            &[true],
            |t, v| {
                let a = t.silu(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.elu_plus_one(v[0]);
                let ab = t.mul(a, b)?;
                let abc = t.add(ab, c)?;
                project(t, abc, 11)
            },
        );
        assert_grad("softmax", std::slice::from_ref(&x), &[true], |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 12)
        });
        assert_grad(
            "upsample_bilinear",
            std::slice::from_ref(&x),
            &[true],
            |t, v| {
                let y = t.upsample_bilinear(v[0], shape[2] * 2 + 1, shape[3] * 3)?;
                project(t, y, 13)
            },
        );
        assert_grad("max_pool2d", std::slice::from_ref(&x), &[true], |t, v| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            project(t, y, 14)
        });
    }
}

#[test]
fn gradcheck_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![
        random(&[2, 3, 4], &mut rng),
        random(&[2, 4, 5], &mut rng),
        random(&[2, 1, 5], &mut rng),
    ];
    assert_grad("bmm/transpose/div", &inputs, &[true; 3], |t, v| {
        let ab = t.bmm(v[0], v[1])?;
        let den = t.exp(v[2]);
        let q = t.div(ab, den)?;
        let qt = t.transpose_last2(q)?;
        let s = t.sum_axis(qt, 2)?;
        project(t, s, 15)
    });
}

// ---- properties -----------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2, 3, 2], vals).unwrap());
        let y = t.softmax(x, axis).unwrap();
        let s = t.sum_axis(y, axis).unwrap();
        prop_assert!(t.value(y).data().iter().all(|&p| p >= 0.0));
        for &v in t.value(s).data() {
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
        name in "[a-z._]{1,24}",
    ) {
        let t = Tensor::new([vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
        let mut buf = Vec::new();
        checkpoint::write_tensors(&mut buf, &[(&name, &t)]).unwrap();
        let back = checkpoint::read_tensors(&buf[..]).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        let bits: Vec<u32> = back[0].1.data().iter().map(|&v| (v as f32).to_bits()).collect();
        let orig: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
        let mut again = Vec::new();
        let rec = [(back[0].0.as_str(), &back[0].1)];
        checkpoint::write_tensors(&mut again, &rec).unwrap();
        prop_assert_eq!(again, buf);
    }
}

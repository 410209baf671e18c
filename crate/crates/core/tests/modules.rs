use evstereo_core::aggregation::Aggregation;
use evstereo_core::backbone::Backbone;
use evstereo_core::cost_volume::level_candidates;
use evstereo_core::gradsuite::randomize_matching;
use evstereo_core::refine::Refiner;
use evstereo_tensor::{Graph, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn candidates(d: usize) -> Vec<usize> {
    [4, 8, 16].iter().map(|&s| level_candidates(d, s)).collect()
}

fn volumes(cands: &[usize], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    cands
        .iter()
        .zip([4, 8, 16])
        .map(|(&d, s)| random(&[2, d, h / s, w / s], rng))
        .collect()
}

#[test]
fn aggregation_is_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cands = candidates(32);
    let mut store = ParamStore::new();
    let agg = Aggregation::new(&mut store, &cands, 2, &mut rng).unwrap();
    let inputs = volumes(&cands, 64, 64, &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(&store, mode, false);
        let vars: Vec<_> = inputs.iter().map(|t| g.tape.constant(t.clone())).collect();
        let out = agg.forward(&mut g, &vars).unwrap();
        assert_eq!(out.stages.len(), if mode == Mode::Train { 2 } else { 1 });
        for stage in &out.stages {
            for (v, t) in stage.iter().zip(&inputs) {
                assert_eq!(g.tape.value(*v), t);
            }
        }
    }
}

#[test]
fn every_stage_is_kept_for_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cands = candidates(32);
    let mut store = ParamStore::new();
    let agg = Aggregation::new(&mut store, &cands, 3, &mut rng).unwrap();
    let inputs = volumes(&cands, 32, 32, &mut rng);
    let mut g = Graph::new(&store, Mode::Train, false);
    let vars: Vec<_> = inputs.iter().map(|t| g.tape.constant(t.clone())).collect();
    let out = agg.forward(&mut g, &vars).unwrap();
    assert_eq!(out.stages.len(), 3);
    assert!(out.stages.iter().all(|s| s.len() == 3));
    assert_eq!(out.volumes(), out.stages[2].as_slice());
}

#[test]
fn cross_scale_fusion_carries_coarse_information_once_trained() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cands = candidates(32);
    let mut store = ParamStore::new();
    let agg = Aggregation::new(&mut store, &cands, 1, &mut rng).unwrap();
    let base = volumes(&cands, 32, 32, &mut rng);
    let mut bumped = base.clone();
    bumped[2] = bumped[2].map(|v| v + 0.5);
    let fine = |store: &ParamStore, inputs: &[Tensor]| -> Tensor {
        let mut g = Graph::new(store, Mode::Eval, false);
        let vars: Vec<_> = inputs.iter().map(|t| g.tape.constant(t.clone())).collect();
        let out = agg.forward(&mut g, &vars).unwrap();
        g.tape.value(out.volumes()[0]).clone()
    };
    // Only the isa layers have been perturbed: the coarse level still cannot
    // reach the fine one.
    randomize_matching(&mut store, 0.3, &mut rng, |n| n.contains(".isa"));
    assert_eq!(fine(&store, &base), fine(&store, &bumped));
    randomize_matching(&mut store, 0.3, &mut rng, |n| n.contains(".csa.2to0"));
    assert!(fine(&store, &base).max_abs_diff(&fine(&store, &bumped)) > 1e-6);
}

#[test]
fn refiner_is_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, 8, 32, &mut rng);
    let init = Tensor::from_fn([2, 1, 16, 24], |i| (i % 37) as f64 * 0.8);
    let (l, r) = (
        random(&[2, 8, 16, 24], &mut rng),
        random(&[2, 8, 16, 24], &mut rng),
    );
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(&store, mode, false);
        let (d, lv, rv) = (
            g.tape.constant(init.clone()),
            g.tape.constant(l.clone()),
            g.tape.constant(r.clone()),
        );
        let out = refiner.forward(&mut g, d, lv, rv).unwrap();
        assert_eq!(
            g.tape.value(out.disparity),
            &init.map(|v| v.clamp(0.0, 31.0))
        );
        assert!(g
            .tape
            .value(out.log_variance)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}

#[test]
fn refiner_rejects_mismatched_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, 4, 16, &mut rng);
    let mut g = Graph::new(&store, Mode::Eval, false);
    let d = g.tape.constant(Tensor::zeros([1, 1, 8, 8]));
    let l = g.tape.constant(Tensor::zeros([1, 4, 8, 8]));
    let r = g.tape.constant(Tensor::zeros([1, 4, 8, 12]));
    assert!(refiner.forward(&mut g, d, l, r).is_err());
    let odd = g.tape.constant(Tensor::zeros([1, 4, 6, 6]));
    let d6 = g.tape.constant(Tensor::zeros([1, 1, 6, 6]));
    assert!(refiner.forward(&mut g, d6, odd, odd).is_err());
}

#[test]
fn backbone_pyramid_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 8, 64, &mut rng);
    let mut g = Graph::new(&store, Mode::Eval, false);
    let x = g.tape.constant(random(&[1, 8, 64, 48], &mut rng));
    let p = bb.encode(&mut g, x).unwrap();
    let shapes: Vec<Vec<usize>> = p.levels.iter().map(|&v| g.tape.shape(v).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 64, 16, 12], vec![1, 64, 8, 6], vec![1, 64, 4, 3]]
    );
    assert_eq!(p.strides, vec![4, 8, 16]);
    let bad = g.tape.constant(Tensor::zeros([1, 8, 40, 48]));
    assert!(bb.encode(&mut g, bad).is_err());
}

#[test]
fn backbone_maps_zero_input_to_zero_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 8, 32, &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(&store, mode, false);
        let x = g.tape.constant(Tensor::zeros([2, 8, 32, 32]));
        let p = bb.encode(&mut g, x).unwrap();
        for v in p.levels {
            assert!(g.tape.value(v).data().iter().all(|&f| f == 0.0));
        }
    }
}

#[test]
fn backbone_gradient_reaches_the_stem() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 4, 16, &mut rng);
    let input = random(&[2, 4, 32, 32], &mut rng);
    let mut g = Graph::new(&store, Mode::Train, true);
    let x = g.tape.constant(input);
    let p = bb.encode(&mut g, x).unwrap();
    let mut total = g.tape.sum(p.levels[2]);
    for &v in &p.levels[..2] {
        let s = g.tape.sum(v);
        total = g.tape.add(total, s).unwrap();
    }
    let sq = g.tape.mul(total, total).unwrap();
    g.tape.backward(sq).unwrap();
    let grads = g.param_grads();
    let stem = store
        .find("backbone.stem.conv.weight")
        .expect("stem weight");
    let (_, grad) = grads
        .iter()
        .find(|(id, _)| *id == stem)
        .expect("stem gradient");
    assert!(grad.data().iter().any(|&v| v.abs() > 0.0));
}

#[test]
fn shared_weights_encode_swapped_views_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 4, 16, &mut rng);
    let (a, b) = (
        random(&[1, 4, 32, 32], &mut rng),
        random(&[1, 4, 32, 32], &mut rng),
    );
    let mut g = Graph::new(&store, Mode::Eval, false);
    let (av, bv) = (g.tape.constant(a), g.tape.constant(b));
    let (l1, r1) = bb.encode_pair(&mut g, av, bv).unwrap();
    let (l2, r2) = bb.encode_pair(&mut g, bv, av).unwrap();
    for s in 0..3 {
        assert_eq!(g.tape.value(l1.levels[s]), g.tape.value(r2.levels[s]));
        assert_eq!(g.tape.value(r1.levels[s]), g.tape.value(l2.levels[s]));
    }
}

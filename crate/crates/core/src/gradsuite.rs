//! Finite-difference gradient checks for every differentiable component.

use evstereo_tensor::gradcheck::{gradcheck, project, GradCheckOptions, GradCheckReport};
use evstereo_tensor::{
    Conv2dParams, Graph, Mode, ParamId, ParamStore, Tape, Tensor, TensorError, Var, BN_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::Aggregation;
use crate::backbone::Backbone;
use crate::cost_volume::correlate;
use crate::disparity::{cost_to_prob, soft_argmax, upsample_disparity};
use crate::error::{Error, Result};
use crate::events::Concentrator;
use crate::loss::{kl_uncertainty_loss, total_loss, Supervised};
use crate::refine::{linear_attention, Refiner};

pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 8] = [
    "tensor",
    "events",
    "backbone",
    "cost-volume",
    "aggregation",
    "disparity",
    "refine",
    "loss",
];

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub module: &'static str,
    pub report: GradCheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "gradsuite",
            msg: other.to_string(),
        },
    }
}

/// Gradcheck a function of plain inputs and selected parameters of `store`.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_module<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    check_inputs: &[bool],
    params: &[ParamId],
    mode: Mode,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|&id| store.get(id).clone()));
    let mut check = check_inputs.to_vec();
    check.extend(std::iter::repeat_n(true, params.len()));
    let seed = opts.seed;
    let report = gradcheck(name, &all, &check, opts, |tape, vars| {
        let mut g = Graph::from_tape(std::mem::take(tape), store, mode, false);
        for (&id, &v) in params.iter().zip(&vars[n..]) {
            g.bind(id, v);
        }
        let out = f(&mut g, &vars[..n]);
        *tape = g.into_tape();
        let out = out.map_err(to_tensor_err)?;
        project(tape, out, seed ^ 0xabcd)
    })?;
    Ok(report)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Fill every trainable parameter with small random values so zero-initialised
/// branches take part in the check.
pub fn randomize_params(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    randomize_matching(store, scale, rng, |_| true);
}

/// As [`randomize_params`], restricted to parameters whose name passes `filter`.
pub fn randomize_matching(
    store: &mut ParamStore,
    scale: f64,
    rng: &mut ChaCha8Rng,
    filter: impl Fn(&str) -> bool,
) {
    let ids: Vec<ParamId> = store
        .trainable_ids()
        .filter(|&id| filter(store.name(id)))
        .collect();
    for id in ids {
        let name = store.name(id).to_string();
        for v in store.get_mut(id).data_mut() {
            *v = if name.ends_with(".gamma") {
                1.0 + rng.gen_range(-0.2..0.2)
            } else {
                rng.gen_range(-scale..scale)
            };
        }
    }
}

fn pick(store: &ParamStore, names: &[&str]) -> Vec<ParamId> {
    names
        .iter()
        .map(|n| store.find(n).unwrap_or_else(|| panic!("no parameter {n}")))
        .collect()
}

/// Integer part plus a fraction kept away from sampling kinks.
fn fractional_shift(rng: &mut ChaCha8Rng, max: i32) -> f64 {
    f64::from(rng.gen_range(0..=max)) + rng.gen_range(0.15..0.85)
}

fn tensor_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let m = "tensor";
    let mut push = |r: GradCheckReport| {
        rows.push(SuiteRow {
            module: m,
            report: r,
        })
    };
    for (i, (xs, ws, p)) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], Conv2dParams::new(1, 1, 1)),
        ([2, 3, 6, 7], [2, 3, 3, 3], Conv2dParams::new(2, 1, 1)),
        ([1, 2, 7, 6], [2, 2, 3, 3], Conv2dParams::new(1, 2, 2)),
    ]
    .into_iter()
    .enumerate()
    {
        let ins = [
            rand_tensor(&xs, rng, -1.0, 1.0),
            rand_tensor(&ws, rng, -1.0, 1.0),
            rand_tensor(&[ws[0]], rng, -1.0, 1.0),
        ];
        push(gradcheck(
            &format!("conv2d#{i}"),
            &ins,
            &[true; 3],
            opts,
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
                project(t, y, 1)
            },
        )?);
    }
    let x = rand_tensor(&[2, 3, 4, 5], rng, -2.0, 2.0);
    let gamma = rand_tensor(&[3], rng, 0.5, 1.5);
    let beta = rand_tensor(&[3], rng, -1.0, 1.0);
    for mode in [Mode::Train, Mode::Eval] {
        let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
        push(gradcheck(
            &format!("batchnorm2d/{mode:?}"),
            &[x.clone(), gamma.clone(), beta.clone()],
            &[true; 3],
            opts,
            |t, v| {
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], &rm, &rv, mode, BN_EPS)?;
                project(t, y, 2)
            },
        )?);
    }
    let (b, c, h, w) = (1, 2, 5, 5);
    let offsets = Tensor::from_fn([b, 18, h, w], |_| {
        let mag: f64 = rng.gen_range(0.15..0.85);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let ins = [
        rand_tensor(&[b, c, h, w], rng, -1.0, 1.0),
        offsets,
        rand_tensor(&[3, c, 3, 3], rng, -1.0, 1.0),
        rand_tensor(&[3], rng, -1.0, 1.0),
    ];
    push(gradcheck(
        "deform_conv2d",
        &ins,
        &[true; 4],
        opts,
        |t, v| {
            let y = t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), Conv2dParams::same(3, 1))?;
            project(t, y, 3)
        },
    )?);
    let img = rand_tensor(&[2, 2, 4, 7], rng, -1.0, 1.0);
    let disp = Tensor::from_fn([2, 1, 4, 7], |_| fractional_shift(rng, 4));
    push(gradcheck(
        "grid_warp",
        &[img, disp],
        &[true, true],
        opts,
        |t, v| {
            let (y, _) = t.grid_warp(v[0], v[1])?;
            project(t, y, 4)
        },
    )?);
    let x = rand_tensor(&[2, 3, 4, 4], rng, -2.0, 2.0);
    type Unary = fn(&mut Tape, Var) -> evstereo_tensor::Result<Var>;
    let unaries: [(&str, Unary); 6] = [
        ("relu", |t, x| Ok(t.relu(x))),
        ("silu", |t, x| Ok(t.silu(x))),
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("softmax", |t, x| t.softmax(x, 1)),
        ("maxpool2d", |t, x| t.max_pool2d(x, 2, 2)),
        ("upsample_bilinear", |t, x| t.upsample_bilinear(x, 7, 9)),
    ];
    for (name, f) in unaries {
        push(gradcheck(
            name,
            std::slice::from_ref(&x),
            &[true],
            opts,
            |t, v| {
                let y = f(t, v[0])?;
                project(t, y, 5)
            },
        )?);
    }
    let a = rand_tensor(&[2, 3, 4], rng, -1.0, 1.0);
    let bm = rand_tensor(&[2, 4, 5], rng, -1.0, 1.0);
    push(gradcheck("bmm", &[a, bm], &[true, true], opts, |t, v| {
        let y = t.bmm(v[0], v[1])?;
        project(t, y, 6)
    })?);
    let p = rand_tensor(&[2, 3], rng, -1.0, 1.0);
    let q = rand_tensor(&[2, 3], rng, -1.0, 1.0);
    push(gradcheck(
        "add/sub/mul",
        &[p, q],
        &[true, true],
        opts,
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let y = t.mul(s, d)?;
            project(t, y, 7)
        },
    )?);
    let mm_a = rand_tensor(&[3, 4], rng, -1.0, 1.0);
    let mm_b = rand_tensor(&[4, 2], rng, -1.0, 1.0);
    push(gradcheck(
        "matmul",
        &[mm_a, mm_b],
        &[true, true],
        opts,
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 8)
        },
    )?);
    Ok(())
}

fn events_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let mut store = ParamStore::new();
    let conc = Concentrator::new(&mut store, "c", 3, 4, rng);
    randomize_params(&mut store, 0.5, rng);
    let stack = Tensor::from_fn([1, 3, 5, 5], |_| f64::from(rng.gen_range(-1i32..=1)));
    let ids = pick(&store, &["c.conv.weight", "c.conv.bias"]);
    let r = gradcheck_module(
        "concentrate",
        &store,
        &[stack],
        &[false],
        &ids,
        Mode::Train,
        opts,
        |g, v| conc.forward(g, v[0]),
    )?;
    rows.push(SuiteRow {
        module: "events",
        report: r,
    });
    Ok(())
}

fn backbone_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 2, 8, rng);
    randomize_matching(&mut store, 0.3, rng, |n| n.contains(".offset."));
    let x = rand_tensor(&[2, 2, 32, 32], rng, -1.0, 1.0);
    let ids = pick(
        &store,
        &[
            "backbone.stem.conv.weight",
            "backbone.stage2.1.conv2.offset.weight",
            "backbone.stage2.1.conv2.weight",
            "backbone.fpn.lateral2.weight",
        ],
    );
    let opts = GradCheckOptions {
        max_probes: 16,
        ..opts.clone()
    };
    // Batch statistics over a deep stack make the function too curved for
    // central differences; batch norm itself is checked in train mode above.
    let r = gradcheck_module(
        "encode (eval)",
        &store,
        &[x],
        &[true],
        &ids,
        Mode::Eval,
        &opts,
        |g, v| {
            let p = bb.encode(g, v[0])?;
            let sa = g.tape.sum(p.levels[0]);
            let sb = g.tape.sum(p.levels[2]);
            Ok(g.tape.add(sa, sb)?)
        },
    )?;
    rows.push(SuiteRow {
        module: "backbone",
        report: r,
    });
    Ok(())
}

fn cost_volume_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    for (i, shape) in [[1, 4, 3, 6], [2, 3, 4, 5], [1, 2, 2, 9]]
        .iter()
        .enumerate()
    {
        let ins = [
            rand_tensor(shape, rng, -1.0, 1.0),
            rand_tensor(shape, rng, -1.0, 1.0),
        ];
        let r = gradcheck(
            &format!("correlate#{i}"),
            &ins,
            &[true, true],
            opts,
            |t, v| {
                let (c, _) = correlate(t, v[0], v[1], 5).map_err(to_tensor_err)?;
                project(t, c, 9)
            },
        )?;
        rows.push(SuiteRow {
            module: "cost-volume",
            report: r,
        });
    }
    Ok(())
}

fn aggregation_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let mut store = ParamStore::new();
    let cands = [6, 3, 2];
    let agg = Aggregation::new(&mut store, &cands, 2, rng)?;
    randomize_params(&mut store, 0.2, rng);
    let vols: Vec<Tensor> = [(6, 8), (3, 4), (2, 2)]
        .iter()
        .map(|&(d, s)| rand_tensor(&[1, d, s, s], rng, -1.0, 1.0))
        .collect();
    let ids = pick(
        &store,
        &[
            "agg.stage1.isa0.deform1.offset.weight",
            "agg.stage1.isa0.deform0.weight",
            "agg.stage0.csa.2to0.weight",
            "agg.stage1.csa.0to2.1.weight",
        ],
    );
    let r = gradcheck_module(
        "aggregate/2-stage",
        &store,
        &vols,
        &[true, true, true],
        &ids,
        Mode::Train,
        opts,
        |g, v| {
            let out = agg.forward(g, v)?;
            let fine = out.volumes()[0];
            let coarse = out.volumes()[2];
            let a = g.tape.sum(coarse);
            let b = g.tape.mul(fine, fine)?;
            let b = g.tape.sum(b);
            Ok(g.tape.add(a, b)?)
        },
    )?;
    rows.push(SuiteRow {
        module: "aggregation",
        report: r,
    });
    Ok(())
}

fn disparity_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let vol = rand_tensor(&[2, 5, 3, 4], rng, -2.0, 2.0);
    let r = gradcheck(
        "cost_to_prob+soft_argmax+upsample",
        &[vol],
        &[true],
        opts,
        |t, v| {
            let p = cost_to_prob(t, v[0]).map_err(to_tensor_err)?;
            let d = soft_argmax(t, p).map_err(to_tensor_err)?;
            let u = upsample_disparity(t, d, 2).map_err(to_tensor_err)?;
            project(t, u, 10)
        },
    )?;
    rows.push(SuiteRow {
        module: "disparity",
        report: r,
    });
    Ok(())
}

fn refine_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let qkv: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(&[1, 4, 3, 3], rng, -1.0, 1.0))
        .collect();
    let r = gradcheck("linear_attention", &qkv, &[true; 3], opts, |t, v| {
        let y = linear_attention(t, v[0], v[1], v[2]).map_err(to_tensor_err)?;
        project(t, y, 11)
    })?;
    rows.push(SuiteRow {
        module: "refine",
        report: r,
    });

    let mut store = ParamStore::new();
    let max_d = 8;
    let refiner = Refiner::new(&mut store, 2, max_d, rng);
    randomize_params(&mut store, 0.3, rng);
    let left = rand_tensor(&[1, 2, 8, 8], rng, -1.0, 1.0);
    let right = rand_tensor(&[1, 2, 8, 8], rng, -1.0, 1.0);
    let init = Tensor::from_fn([1, 1, 8, 8], |_| fractional_shift(rng, 3) + 1.0);
    let ids = pick(
        &store,
        &[
            "refine.enc0.conv.weight",
            "refine.lab.q.weight",
            "refine.lab.v.weight",
            "refine.dilated.d4.weight",
            "refine.residual.weight",
            "refine.log_var.weight",
        ],
    );
    let r = gradcheck_module(
        "refine",
        &store,
        &[init, left, right],
        &[true; 3],
        &ids,
        Mode::Train,
        opts,
        |g, v| {
            let out = refiner.forward(g, v[0], v[1], v[2])?;
            let lv = g.tape.scale(out.log_variance, 0.5);
            Ok(g.tape.add(out.disparity, lv)?)
        },
    )?;
    rows.push(SuiteRow {
        module: "refine",
        report: r,
    });
    Ok(())
}

fn loss_suite(
    rows: &mut Vec<SuiteRow>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<()> {
    let shape = [1, 1, 4, 5];
    let gt = rand_tensor(&shape, rng, 0.0, 6.0);
    let pred = Tensor::from_fn(shape.to_vec(), |i| {
        let r: f64 = rng.gen_range(0.2..2.5);
        gt.data()[i] + if rng.gen_bool(0.5) { r } else { -r }
    });
    let lv = rand_tensor(&shape, rng, -1.5, 1.5);
    let mask: Vec<bool> = (0..20).map(|i| i % 7 != 3).collect();
    let ins = [pred.clone(), lv.clone(), gt.clone()];
    let r = gradcheck(
        "kl_uncertainty_loss",
        &ins,
        &[true, true, false],
        opts,
        |t, v| kl_uncertainty_loss(t, v[0], v[1], v[2], &mask, 2.0, 1.0).map_err(to_tensor_err),
    )?;
    rows.push(SuiteRow {
        module: "loss",
        report: r,
    });
    let pred2 = Tensor::from_fn(shape.to_vec(), |i| pred.data()[i] + rng.gen_range(0.2..0.8));
    let r = gradcheck(
        "total_loss",
        &[pred, pred2, lv, gt],
        &[true, true, true, false],
        opts,
        |t, v| {
            let outs = [
                Supervised {
                    pred: v[0],
                    log_var: None,
                    target_max: Some(1.5),
                },
                Supervised {
                    pred: v[1],
                    log_var: Some(v[2]),
                    target_max: None,
                },
            ];
            total_loss(t, &outs, &[0.5, 1.0], v[3], &mask, 2.0, 1.0).map_err(to_tensor_err)
        },
    )?;
    rows.push(SuiteRow {
        module: "loss",
        report: r,
    });
    Ok(())
}

/// Run the checks of one module (or `all`).
pub fn run(selector: &str, seed: u64) -> Result<Vec<SuiteRow>> {
    let selected: Vec<&str> = if selector == "all" {
        MODULES.to_vec()
    } else if MODULES.contains(&selector) {
        vec![selector]
    } else {
        return Err(Error::Invalid(format!(
            "unknown module `{selector}`; expected one of all, {}",
            MODULES.join(", ")
        )));
    };
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rows = Vec::new();
    for m in selected {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ m.len() as u64 ^ (m.as_bytes()[0] as u64) << 8);
        match m {
            "tensor" => tensor_suite(&mut rows, &mut rng, &opts)?,
            "events" => events_suite(&mut rows, &mut rng, &opts)?,
            "backbone" => backbone_suite(&mut rows, &mut rng, &opts)?,
            "cost-volume" => cost_volume_suite(&mut rows, &mut rng, &opts)?,
            "aggregation" => aggregation_suite(&mut rows, &mut rng, &opts)?,
            "disparity" => disparity_suite(&mut rows, &mut rng, &opts)?,
            "refine" => refine_suite(&mut rows, &mut rng, &opts)?,
            "loss" => loss_suite(&mut rows, &mut rng, &opts)?,
            _ => unreachable!(),
        }
    }
    Ok(rows)
}

pub fn format_rows(rows: &[SuiteRow]) -> String {
    let mut s = format!(
        "{:<12} {:<36} {:>12} {:>12} {:>7}  result\n",
        "module", "check", "max_rel", "max_abs", "probes"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<36} {:>12.3e} {:>12.3e} {:>7}  {}\n",
            r.module,
            r.report.name,
            r.report.max_rel_error,
            r.report.max_abs_error,
            r.report.probes,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

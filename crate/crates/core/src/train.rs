//! Training loop: AdamW with a cosine schedule over random crops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use evstereo_tensor::optim::{AdamW, CosineSchedule};
use evstereo_tensor::{Graph, Mode, ParamStore, BN_MOMENTUM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{make_batch, Batch, Sample};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::model::StereoNet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trained {
    pub net: StereoNet,
    pub params: ParamStore,
    pub log: Vec<LossRecord>,
}

/// Forward and backward on one batch; returns the loss and leaves gradients
/// and batch statistics in the graph.
pub fn loss_on_batch(
    net: &StereoNet,
    g: &mut Graph,
    batch: &Batch,
    cfg: &RunConfig,
    iteration: usize,
) -> Result<f64> {
    let left = g.tape.constant(batch.left.clone());
    let right = g.tape.constant(batch.right.clone());
    let gt = g.tape.constant(batch.disparity.clone());
    let out = net.forward(g, left, right)?;
    let loss_cfg = cfg.loss();
    let (sup, weights) = out.supervision(&loss_cfg)?;
    let loss = total_loss(
        &mut g.tape,
        &sup,
        &weights,
        gt,
        &batch.mask,
        loss_cfg.alpha,
        loss_cfg.smooth_l1_beta,
    )?;
    let value = g.tape.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        let (node, op) = g.tape.first_non_finite().unwrap_or((loss.index(), "loss"));
        return Err(Error::NonFiniteLoss {
            iteration,
            op,
            node,
        });
    }
    g.tape.backward(loss)?;
    Ok(value)
}

pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    mut progress: impl FnMut(&LossRecord),
) -> Result<Trained> {
    cfg.validate()?;
    let (net, mut params) = StereoNet::new(cfg.model(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4e5);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        total_steps: cfg.iterations,
    };
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = make_batch(
            samples,
            cfg.batch_size,
            cfg.crop,
            cfg.flip,
            cfg.window_jitter,
            &mut rng,
        )?;
        let (loss, grads, stats) = {
            let mut g = Graph::new(&params, Mode::Train, true);
            let loss = loss_on_batch(&net, &mut g, &batch, cfg, it)?;
            (loss, g.param_grads(), g.take_bn_updates())
        };
        let lr = schedule.lr(it);
        opt.step(&mut params, &grads, lr);
        params.apply_batch_stats(&stats, BN_MOMENTUM);
        let rec = LossRecord {
            iteration: it,
            loss,
            lr,
        };
        progress(&rec);
        log.push(rec);
    }
    Ok(Trained { net, params, log })
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.loss, r.lr);
    }
    s
}

/// Write `loss.csv`, `checkpoint.evsk` and `config.txt` into `dir`.
pub fn save_run(dir: impl AsRef<Path>, cfg: &RunConfig, trained: &Trained) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("loss.csv"), loss_csv(&trained.log))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    trained.params.save(dir.join("checkpoint.evsk"))?;
    Ok(())
}

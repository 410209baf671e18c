//! The full stereo network: concentrator, shared encoder, cost pyramid,
//! aggregation, soft-argmax heads and refinement.

use evstereo_tensor::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::Aggregation;
use crate::backbone::{Backbone, LEVEL_STRIDES};
use crate::cost_volume::{build_pyramid, level_candidates};
use crate::disparity::volume_to_disparity;
use crate::error::{invalid, Result};
use crate::events::Concentrator;
use crate::loss::{LossConfig, Supervised};
use crate::refine::Refiner;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Density scales per event stack.
    pub scales: usize,
    pub rep_channels: usize,
    pub feature_channels: usize,
    pub max_disparity: usize,
    pub stages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            rep_channels: 8,
            feature_channels: 64,
            max_disparity: 32,
            stages: 2,
        }
    }
}

impl ModelConfig {
    pub fn candidates(&self) -> Vec<usize> {
        LEVEL_STRIDES
            .iter()
            .map(|&s| level_candidates(self.max_disparity, s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.rep_channels == 0 || self.feature_channels == 0 {
            return invalid("scales, rep_channels and feature_channels must be positive");
        }
        if self.max_disparity < 2 {
            return invalid(format!(
                "max disparity must be at least 2, got {}",
                self.max_disparity
            ));
        }
        if self.stages == 0 {
            return invalid("need at least one aggregation stage");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StereoNet {
    pub config: ModelConfig,
    pub concentrator: Concentrator,
    pub backbone: Backbone,
    pub aggregation: Aggregation,
    pub refiner: Refiner,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    /// `[stage][level]` full-resolution disparities, levels fine to coarse.
    pub stage_disparities: Vec<Vec<Var>>,
    /// Finest final-stage disparity fed to the refiner.
    pub initial: Var,
    pub refined: Var,
    pub log_variance: Var,
    /// Largest value each level's soft-argmax can reach, `(D_s - 1) * stride`.
    pub level_max: Vec<f64>,
}

impl StereoNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let concentrator = Concentrator::new(
            &mut store,
            "concentrator",
            config.scales,
            config.rep_channels,
            &mut rng,
        );
        let backbone = Backbone::new(
            &mut store,
            config.rep_channels,
            config.feature_channels,
            &mut rng,
        );
        let aggregation =
            Aggregation::new(&mut store, &config.candidates(), config.stages, &mut rng)?;
        let refiner = Refiner::new(
            &mut store,
            config.rep_channels,
            config.max_disparity,
            &mut rng,
        );
        Ok((
            Self {
                config,
                concentrator,
                backbone,
                aggregation,
                refiner,
            },
            store,
        ))
    }

    /// `left` and `right` are `[B, M, H, W]` event stacks.
    pub fn forward(&self, g: &mut Graph, left: Var, right: Var) -> Result<NetOutput> {
        let (_, m, _, _) = g.tape.value(left).dims4("forward")?;
        if m != self.config.scales {
            return invalid(format!(
                "expected {} stack channels, got {m}",
                self.config.scales
            ));
        }
        if g.tape.shape(left) != g.tape.shape(right) {
            return invalid(format!(
                "view shapes differ: {:?} vs {:?}",
                g.tape.shape(left),
                g.tape.shape(right)
            ));
        }
        let lrep = self.concentrator.forward(g, left)?;
        let rrep = self.concentrator.forward(g, right)?;
        let (lf, rf) = self.backbone.encode_pair(g, lrep, rrep)?;
        let costs = build_pyramid(&mut g.tape, &lf, &rf, self.config.max_disparity)?;
        let agg = self.aggregation.forward(g, &costs.volumes)?;
        let mut stage_disparities = Vec::with_capacity(agg.stages.len());
        for stage in &agg.stages {
            let mut levels = Vec::with_capacity(stage.len());
            for (&v, &stride) in stage.iter().zip(&costs.strides) {
                levels.push(volume_to_disparity(&mut g.tape, v, stride)?);
            }
            stage_disparities.push(levels);
        }
        let initial = stage_disparities.last().expect("one stage")[0];
        let r = self.refiner.forward(g, initial, lrep, rrep)?;
        let level_max = self
            .config
            .candidates()
            .iter()
            .zip(&costs.strides)
            .map(|(&d, &s)| ((d - 1) * s) as f64)
            .collect();
        Ok(NetOutput {
            stage_disparities,
            initial,
            refined: r.disparity,
            log_variance: r.log_variance,
            level_max,
        })
    }
}

impl NetOutput {
    /// Supervised maps and their weights: every stage at every level with
    /// the per-level weight, then the refined output.
    pub fn supervision(&self, cfg: &LossConfig) -> Result<(Vec<Supervised>, Vec<f64>)> {
        let mut outs = Vec::new();
        let mut weights = Vec::new();
        for stage in &self.stage_disparities {
            if stage.len() != cfg.scale_weights.len() || stage.len() != self.level_max.len() {
                return invalid(format!(
                    "{} pyramid levels but {} scale weights",
                    stage.len(),
                    cfg.scale_weights.len()
                ));
            }
            for (l, &pred) in stage.iter().enumerate() {
                outs.push(Supervised {
                    pred,
                    log_var: None,
                    target_max: Some(self.level_max[l]),
                });
                weights.push(cfg.scale_weights[stage.len() - 1 - l]);
            }
        }
        outs.push(Supervised {
            pred: self.refined,
            log_var: cfg.uncertainty.then_some(self.log_variance),
            target_max: None,
        });
        weights.push(cfg.refined_weight);
        Ok((outs, weights))
    }
}

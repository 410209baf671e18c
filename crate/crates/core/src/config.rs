//! Run configuration as plain `key = value` text.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SceneParams;

/// Every hyperparameter of a run. Defaults are desk-scale; the full-scale
/// reference setting is `max_disparity = 192`, `batch_size = 8`, a 640x480
/// sensor and many more iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub max_disparity: usize,
    /// Events per stack window (`N`).
    pub window_events: usize,
    /// Density scales (`M`).
    pub scales: usize,
    pub rep_channels: usize,
    pub feature_channels: usize,
    pub stages: usize,
    pub alpha: f64,
    pub uncertainty: bool,
    pub smooth_l1_beta: f64,
    pub scale_weights: Vec<f64>,
    pub refined_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub crop: usize,
    pub flip: bool,
    /// Draw each training window's end time at random instead of using the
    /// end of the recording.
    pub window_jitter: bool,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub frames: usize,
    pub block: u32,
    pub max_foreground: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let model = ModelConfig::default();
        let scene = SceneParams::default();
        Self {
            seed: 0,
            width: scene.width,
            height: scene.height,
            max_disparity: model.max_disparity,
            window_events: 2048,
            scales: model.scales,
            rep_channels: model.rep_channels,
            feature_channels: model.feature_channels,
            stages: model.stages,
            alpha: loss.alpha,
            uncertainty: loss.uncertainty,
            smooth_l1_beta: loss.smooth_l1_beta,
            scale_weights: loss.scale_weights,
            refined_weight: loss.refined_weight,
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 2,
            iterations: 2000,
            crop: 48,
            flip: true,
            window_jitter: true,
            train_scenes: 20,
            test_scenes: 5,
            frames: scene.frames,
            block: scene.block,
            max_foreground: scene.max_foreground,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "max_disparity" => self.max_disparity = parse(key, v)?,
            "window_events" => self.window_events = parse(key, v)?,
            "scales" => self.scales = parse(key, v)?,
            "rep_channels" => self.rep_channels = parse(key, v)?,
            "feature_channels" => self.feature_channels = parse(key, v)?,
            "stages" => self.stages = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "uncertainty" => self.uncertainty = parse_bool(key, v)?,
            "smooth_l1_beta" => self.smooth_l1_beta = parse(key, v)?,
            "scale_weights" => {
                self.scale_weights = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "refined_weight" => self.refined_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "window_jitter" => self.window_jitter = parse_bool(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "test_scenes" => self.test_scenes = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "block" => self.block = parse(key, v)?,
            "max_foreground" => self.max_foreground = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{}` is not key=value", o.as_ref()))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("plain struct");
        let mut s = String::new();
        for (k, val) in v.as_object().expect("object") {
            let text = match val {
                serde_json::Value::Array(a) => a
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {text}");
        }
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            scales: self.scales,
            rep_channels: self.rep_channels,
            feature_channels: self.feature_channels,
            max_disparity: self.max_disparity,
            stages: self.stages,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            smooth_l1_beta: self.smooth_l1_beta,
            scale_weights: self.scale_weights.clone(),
            refined_weight: self.refined_weight,
            uncertainty: self.uncertainty,
        }
    }

    pub fn scene(&self) -> SceneParams {
        SceneParams {
            width: self.width,
            height: self.height,
            max_disparity: self.max_disparity as u32,
            frames: self.frames,
            frame_us: 1000,
            block: self.block,
            max_foreground: self.max_foreground,
            plane_cap: reach(self.max_disparity) as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.scale_weights.len() != 3 {
            return bad(format!(
                "scale_weights needs one weight per pyramid level (3), got {}",
                self.scale_weights.len()
            ));
        }
        if self.window_events < 1 << (self.scales - 1) {
            return bad(format!(
                "window_events {} too small for {} scales",
                self.window_events, self.scales
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.crop == 0
            || !self.crop.is_multiple_of(16)
            || self.crop > self.width.min(self.height)
        {
            return bad(format!(
                "crop {} must be a positive multiple of 16 no larger than the scene",
                self.crop
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Largest disparity the finest cost volume can express.
fn reach(max_disparity: usize) -> usize {
    let s = crate::backbone::LEVEL_STRIDES[0];
    (crate::cost_volume::level_candidates(max_disparity, s) - 1) * s
}

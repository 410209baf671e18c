//! Regression losses, the uncertainty-weighted loss, and disparity metrics.

use std::fmt;

use evstereo_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub smooth_l1_beta: f64,
    /// Per pyramid level, coarse to fine.
    pub scale_weights: Vec<f64>,
    /// Weight on the refined output.
    pub refined_weight: f64,
    /// Supervise the refined output with the variance-weighted loss; plain
    /// smooth-L1 otherwise.
    pub uncertainty: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            smooth_l1_beta: 1.0,
            scale_weights: vec![0.25, 0.5, 1.0],
            refined_weight: 1.0,
            uncertainty: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return invalid(format!(
                "smooth-L1 beta must be positive, got {}",
                self.smooth_l1_beta
            ));
        }
        if self
            .scale_weights
            .iter()
            .chain([&self.refined_weight])
            .any(|w| !(*w >= 0.0))
        {
            return invalid("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Elementwise smooth-L1 of `pred - target`.
pub fn smooth_l1(tape: &mut Tape, pred: Var, target: Var, beta: f64) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    Ok(tape.smooth_l1(r, beta)?)
}

/// Masked mean of smooth-L1.
pub fn plain_loss(tape: &mut Tape, pred: Var, gt: Var, mask: &[bool], beta: f64) -> Result<Var> {
    let l = smooth_l1(tape, pred, gt, beta)?;
    Ok(tape.masked_mean(l, mask)?)
}

/// Masked mean of `SmoothL1(pred, gt) * exp(-log_var) + alpha * log_var`.
pub fn kl_uncertainty_loss(
    tape: &mut Tape,
    pred: Var,
    log_var: Var,
    gt: Var,
    mask: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    let l = smooth_l1(tape, pred, gt, beta)?;
    let neg = tape.neg(log_var);
    let inv_var = tape.exp(neg);
    let data = tape.mul(l, inv_var)?;
    let reg = tape.scale(log_var, alpha);
    let per_pixel = tape.add(data, reg)?;
    Ok(tape.masked_mean(per_pixel, mask)?)
}

/// One supervised disparity map at ground-truth resolution.
#[derive(Clone, Copy, Debug)]
pub struct Supervised {
    pub pred: Var,
    pub log_var: Option<Var>,
    /// Largest disparity the output can express; the target is clamped to it.
    pub target_max: Option<f64>,
}

/// `sum_i w_i L_i`, where `L_i` is the uncertainty loss for outputs carrying
/// a variance head and plain smooth-L1 otherwise.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &[Supervised],
    weights: &[f64],
    gt: Var,
    mask: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if outputs.len() != weights.len() {
        return invalid(format!(
            "{} supervised outputs but {} loss weights",
            outputs.len(),
            weights.len()
        ));
    }
    if outputs.is_empty() {
        return invalid("no supervised outputs");
    }
    let mut total: Option<Var> = None;
    for (o, &w) in outputs.iter().zip(weights) {
        let target = match o.target_max {
            Some(hi) => tape.clamp(gt, f64::MIN, hi),
            None => gt,
        };
        let l = match o.log_var {
            Some(lv) => kl_uncertainty_loss(tape, o.pred, lv, target, mask, alpha, beta)?,
            None => plain_loss(tape, o.pred, target, mask, beta)?,
        };
        let l = tape.scale(l, w);
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Closed-form Gaussian divergence `0.5 [(mu_g - mu)^2 / s^2 + s_g^2 / s^2 - 1 + ln(s^2 / s_g^2)]`
/// between a predicted `N(mu, s^2)` and a target `N(mu_g, s_g^2)`.
pub fn kl_gaussian_closed_form(mu: f64, var: f64, mu_g: f64, var_g: f64) -> f64 {
    0.5 * ((mu_g - mu).powi(2) / var + var_g / var - 1.0 + (var / var_g).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub pe1_percent: f64,
    pub pe2_percent: f64,
    pub n_valid: usize,
}

/// Running sums for pooling metrics over many samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    over1: usize,
    over2: usize,
    n: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return invalid(format!(
                "metric inputs differ in length: {} / {} / {}",
                pred.len(),
                gt.len(),
                mask.len()
            ));
        }
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if m {
                let e = (p - g).abs();
                self.abs += e;
                self.sq += e * e;
                self.over1 += usize::from(e > 1.0);
                self.over2 += usize::from(e > 2.0);
                self.n += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.over1 += other.over1;
        self.over2 += other.over2;
        self.n += other.n;
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return invalid("no valid pixels to evaluate");
        }
        let n = self.n as f64;
        Ok(MetricReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            pe1_percent: 100.0 * self.over1 as f64 / n,
            pe2_percent: 100.0 * self.over2 as f64 / n,
            n_valid: self.n,
        })
    }
}

pub fn metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.report()
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn table(rows: &[(String, MetricReport)]) -> String {
        let name_w = rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max("sample".len());
        let mut s = format!(
            "{:<name_w$}  {:>9}  {:>9}  {:>11}  {:>11}  {:>8}\n",
            "sample", "mae", "rmse", "pe1_percent", "pe2_percent", "n_valid"
        );
        for (name, r) in rows {
            s.push_str(&format!(
                "{:<name_w$}  {:>9.4}  {:>9.4}  {:>11.3}  {:>11.3}  {:>8}\n",
                name, r.mae, r.rmse, r.pe1_percent, r.pe2_percent, r.n_valid
            ));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAE {:.4}  RMSE {:.4}  1PE {:.3}%  2PE {:.3}%  ({} px)",
            self.mae, self.rmse, self.pe1_percent, self.pe2_percent, self.n_valid
        )
    }
}

/// MAE of the pixels kept after discarding the highest-variance fraction,
/// for fractions `k / steps`, `k = 0..steps`.
pub fn sparsification_curve(
    pred: &[f64],
    log_var: &[f64],
    gt: &[f64],
    mask: &[bool],
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    if steps < 2 {
        return invalid("sparsification needs at least 2 steps");
    }
    if pred.len() != gt.len() || pred.len() != mask.len() || pred.len() != log_var.len() {
        return invalid("sparsification inputs differ in length");
    }
    let mut px: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| (log_var[i], (pred[i] - gt[i]).abs()))
        .collect();
    if px.is_empty() {
        return invalid("no valid pixels to evaluate");
    }
    px.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = px.len();
    Ok((0..steps)
        .map(|k| {
            let frac = k as f64 / steps as f64;
            let removed = ((frac * n as f64).round() as usize).min(n - 1);
            let kept = &px[removed..];
            (
                frac,
                kept.iter().map(|p| p.1).sum::<f64>() / kept.len() as f64,
            )
        })
        .collect())
}

//! Inference with test-time padding, and metric evaluation over a split.

use evstereo_tensor::{Graph, Mode, ParamStore, Tensor};

use crate::backbone::SIZE_MULTIPLE;
use crate::dataset::Sample;
use crate::error::{invalid, Result};
use crate::loss::{MetricAccumulator, MetricReport};
use crate::model::StereoNet;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    /// Refined disparity, row-major.
    pub disparity: Vec<f64>,
    pub log_variance: Vec<f64>,
    /// Coarse soft-argmax estimate before refinement.
    pub initial: Vec<f64>,
}

/// Run the network on one `[M, H, W]` pair. Inputs are zero-padded on the
/// bottom and right to a multiple of 16 and the outputs cropped back.
pub fn predict(
    net: &StereoNet,
    params: &ParamStore,
    left: &Tensor,
    right: &Tensor,
) -> Result<Prediction> {
    if left.shape() != right.shape() || left.rank() != 3 {
        return invalid(format!(
            "expected matching [M, H, W] stacks, got {:?} and {:?}",
            left.shape(),
            right.shape()
        ));
    }
    let (m, h, w) = (left.shape()[0], left.shape()[1], left.shape()[2]);
    let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let prep =
        |t: &Tensor| -> Result<Tensor> { Ok(t.pad_spatial(ph, pw)?.reshape([1, m, ph, pw])?) };
    let mut g = Graph::new(params, Mode::Eval, false);
    let l = g.tape.constant(prep(left)?);
    let r = g.tape.constant(prep(right)?);
    let out = net.forward(&mut g, l, r)?;
    let crop =
        |v| -> Result<Vec<f64>> { Ok(g.tape.value(v).crop_spatial(0, 0, h, w)?.into_data()) };
    Ok(Prediction {
        width: w,
        height: h,
        disparity: crop(out.refined)?,
        log_variance: crop(out.log_variance)?,
        initial: crop(out.initial)?,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_sample: Vec<(String, MetricReport)>,
    /// Pooled over every valid pixel of every sample.
    pub aggregate: MetricReport,
    /// Same, for the coarse estimate alone.
    pub initial_aggregate: MetricReport,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(net: &StereoNet, params: &ParamStore, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return invalid("no samples to evaluate");
    }
    let mut all = MetricAccumulator::default();
    let mut coarse = MetricAccumulator::default();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(net, params, &s.left, &s.right)?;
        let mut acc = MetricAccumulator::default();
        acc.add(&p.disparity, s.disparity.data(), &s.valid)?;
        coarse.add(&p.initial, s.disparity.data(), &s.valid)?;
        all.merge(&acc);
        per_sample.push((s.name.clone(), acc.report()?));
        predictions.push(p);
    }
    Ok(EvalReport {
        per_sample,
        aggregate: all.report()?,
        initial_aggregate: coarse.report()?,
        predictions,
    })
}

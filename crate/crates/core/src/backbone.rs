//! Shared residual encoder with a feature pyramid on top.

use evstereo_tensor::{Conv2dParams, Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ConvBn, Init, ResidualBlock};

pub const STAGE_WIDTHS: [usize; 3] = [32, 48, 64];
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

/// Multi-scale features, fine to coarse.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    pub feature_channels: usize,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        in_ch: usize,
        feature_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem_ch = STAGE_WIDTHS[0];
        let stem = ConvBn::new(
            store,
            "backbone.stem",
            in_ch,
            stem_ch,
            3,
            Conv2dParams::new(2, 1, 1),
            true,
            rng,
        );
        let mut stages = Vec::new();
        let mut prev = stem_ch;
        for (s, &width) in STAGE_WIDTHS.iter().enumerate() {
            let deform = s == STAGE_WIDTHS.len() - 1;
            let blocks = vec![
                ResidualBlock::new(
                    store,
                    &format!("backbone.stage{s}.0"),
                    prev,
                    width,
                    2,
                    deform,
                    rng,
                ),
                ResidualBlock::new(
                    store,
                    &format!("backbone.stage{s}.1"),
                    width,
                    width,
                    1,
                    deform,
                    rng,
                ),
            ];
            stages.push(blocks);
            prev = width;
        }
        let laterals = STAGE_WIDTHS
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                Conv2d::new(
                    store,
                    &format!("backbone.fpn.lateral{s}"),
                    w,
                    feature_channels,
                    1,
                    Conv2dParams::default(),
                    true,
                    Init::Kaiming,
                    rng,
                )
            })
            .collect();
        let smooth = (0..STAGE_WIDTHS.len())
            .map(|s| {
                Conv2d::new(
                    store,
                    &format!("backbone.fpn.smooth{s}"),
                    feature_channels,
                    feature_channels,
                    3,
                    Conv2dParams::same(3, 1),
                    true,
                    Init::Kaiming,
                    rng,
                )
            })
            .collect();
        Self {
            stem,
            stages,
            laterals,
            smooth,
            feature_channels,
        }
    }

    pub fn encode(&self, g: &mut Graph, view: Var) -> Result<FeaturePyramid> {
        let (_, _, h, w) = g.tape.value(view).dims4("encode")?;
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return invalid(format!(
                "input {h}x{w} must have height and width divisible by {SIZE_MULTIPLE}"
            ));
        }
        let mut x = self.stem.forward(g, view)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, x)?;
            }
            taps.push(x);
        }
        let mut levels = vec![None; taps.len()];
        let mut top: Option<Var> = None;
        for s in (0..taps.len()).rev() {
            let mut p = self.laterals[s].forward(g, taps[s])?;
            if let Some(t) = top {
                let (_, _, ph, pw) = g.tape.value(p).dims4("fpn")?;
                let up = g.tape.upsample_bilinear(t, ph, pw)?;
                p = g.tape.add(p, up)?;
            }
            top = Some(p);
            levels[s] = Some(self.smooth[s].forward(g, p)?);
        }
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(Option::unwrap).collect(),
            strides: LEVEL_STRIDES.to_vec(),
        })
    }

    /// Encode both views with the same weights.
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        left: Var,
        right: Var,
    ) -> Result<(FeaturePyramid, FeaturePyramid)> {
        if g.tape.shape(left) != g.tape.shape(right) {
            return invalid(format!(
                "view shapes differ: {:?} vs {:?}",
                g.tape.shape(left),
                g.tape.shape(right)
            ));
        }
        Ok((self.encode(g, left)?, self.encode(g, right)?))
    }
}

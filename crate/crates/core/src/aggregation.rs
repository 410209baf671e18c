//! Intra-scale and cross-scale cost aggregation.

use evstereo_tensor::{Conv2dParams, Graph, Mode, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, DeformConv2d, Init};

pub const ISA_HIDDEN: usize = 16;

/// Residual stack of deformable 3x3 convolutions treating disparity
/// candidates as channels. The output conv starts at zero.
#[derive(Clone, Debug)]
pub struct Isa {
    convs: Vec<DeformConv2d>,
    out: Conv2d,
}

impl Isa {
    /// `extra` adds deformable convs beyond the first.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        candidates: usize,
        extra: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = Conv2dParams::same(3, 1);
        let convs = (0..=extra)
            .map(|i| {
                let in_ch = if i == 0 { candidates } else { ISA_HIDDEN };
                DeformConv2d::new(
                    store,
                    &format!("{name}.deform{i}"),
                    in_ch,
                    ISA_HIDDEN,
                    p,
                    true,
                    Init::Kaiming,
                    rng,
                )
            })
            .collect();
        let out = Conv2d::new(
            store,
            &format!("{name}.out"),
            ISA_HIDDEN,
            candidates,
            3,
            p,
            true,
            Init::Zeros,
            rng,
        );
        Self { convs, out }
    }

    pub fn forward(&self, g: &mut Graph, volume: Var) -> Result<Var> {
        let mut y = volume;
        for conv in &self.convs {
            y = conv.forward(g, y)?;
            y = g.tape.relu(y);
        }
        let y = self.out.forward(g, y)?;
        Ok(g.tape.add(volume, y)?)
    }
}

#[derive(Clone, Debug)]
enum Path {
    /// Coarse to fine: 1x1 alignment then bilinear resize.
    Up(Conv2d),
    /// Fine to coarse: stride-2 3x3 convs, one per octave.
    Down(Vec<Conv2d>),
}

/// Additive fusion of every level into every other level.
#[derive(Clone, Debug)]
pub struct Csa {
    /// `paths[dst][src]`, `None` on the diagonal.
    paths: Vec<Vec<Option<Path>>>,
}

impl Csa {
    /// `candidates` is fine to coarse; adjacent levels differ by a factor 2.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        candidates: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = candidates.len();
        let mut paths = Vec::with_capacity(n);
        for dst in 0..n {
            let mut row = Vec::with_capacity(n);
            for src in 0..n {
                let tag = format!("{name}.{src}to{dst}");
                row.push(if src == dst {
                    None
                } else if src > dst {
                    Some(Path::Up(Conv2d::new(
                        store,
                        &tag,
                        candidates[src],
                        candidates[dst],
                        1,
                        Conv2dParams::default(),
                        true,
                        Init::Zeros,
                        rng,
                    )))
                } else {
                    let steps = dst - src;
                    let convs = (0..steps)
                        .map(|k| {
                            let last = k + 1 == steps;
                            let out = if last {
                                candidates[dst]
                            } else {
                                candidates[src]
                            };
                            let init = if last { Init::Zeros } else { Init::Kaiming };
                            Conv2d::new(
                                store,
                                &format!("{tag}.{k}"),
                                candidates[src],
                                out,
                                3,
                                Conv2dParams::new(2, 1, 1),
                                true,
                                init,
                                rng,
                            )
                        })
                        .collect();
                    Some(Path::Down(convs))
                });
            }
            paths.push(row);
        }
        Self { paths }
    }

    pub fn forward(&self, g: &mut Graph, volumes: &[Var]) -> Result<Vec<Var>> {
        if volumes.len() != self.paths.len() {
            return invalid(format!(
                "cross-scale fusion built for {} levels, got {}",
                self.paths.len(),
                volumes.len()
            ));
        }
        let mut out = Vec::with_capacity(volumes.len());
        for (dst, row) in self.paths.iter().enumerate() {
            let (_, _, h, w) = g.tape.value(volumes[dst]).dims4("csa")?;
            let mut acc = volumes[dst];
            for (src, path) in row.iter().enumerate() {
                let term = match path {
                    None => continue,
                    Some(Path::Up(conv)) => {
                        let y = conv.forward(g, volumes[src])?;
                        g.tape.upsample_bilinear(y, h, w)?
                    }
                    Some(Path::Down(convs)) => {
                        let mut y = volumes[src];
                        for (k, conv) in convs.iter().enumerate() {
                            y = conv.forward(g, y)?;
                            if k + 1 < convs.len() {
                                y = g.tape.relu(y);
                            }
                        }
                        y
                    }
                };
                if g.tape.shape(term) != g.tape.shape(acc) {
                    return invalid(format!(
                        "level {src} resampled to {:?}, expected {:?}",
                        g.tape.shape(term),
                        g.tape.shape(acc)
                    ));
                }
                acc = g.tape.add(acc, term)?;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct AggregationStage {
    pub isa: Vec<Isa>,
    pub csa: Csa,
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub stages: Vec<AggregationStage>,
}

/// Output of every stage, fine to coarse within each. The last entry is the
/// final pyramid.
#[derive(Clone, Debug)]
pub struct AggregatedPyramid {
    pub stages: Vec<Vec<Var>>,
}

impl AggregatedPyramid {
    pub fn volumes(&self) -> &[Var] {
        self.stages.last().expect("at least one stage")
    }
}

impl Aggregation {
    pub fn new(
        store: &mut ParamStore,
        candidates: &[usize],
        stages: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if stages == 0 {
            return invalid("aggregation needs at least one stage");
        }
        let stages = (0..stages)
            .map(|s| AggregationStage {
                isa: candidates
                    .iter()
                    .enumerate()
                    .map(|(l, &d)| Isa::new(store, &format!("agg.stage{s}.isa{l}"), d, s, rng))
                    .collect(),
                csa: Csa::new(store, &format!("agg.stage{s}.csa"), candidates, rng),
            })
            .collect();
        Ok(Self { stages })
    }

    /// Alternate intra- and cross-scale aggregation. In train mode every
    /// stage output is kept for supervision, otherwise only the last.
    pub fn forward(&self, g: &mut Graph, volumes: &[Var]) -> Result<AggregatedPyramid> {
        let mut cur = volumes.to_vec();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if stage.isa.len() != cur.len() {
                return invalid(format!(
                    "aggregation built for {} levels, got {}",
                    stage.isa.len(),
                    cur.len()
                ));
            }
            let mut isa_out = Vec::with_capacity(cur.len());
            for (isa, &v) in stage.isa.iter().zip(&cur) {
                isa_out.push(isa.forward(g, v)?);
            }
            cur = stage.csa.forward(g, &isa_out)?;
            stages.push(cur.clone());
        }
        if g.mode() == Mode::Eval {
            stages.drain(..stages.len() - 1);
        }
        Ok(AggregatedPyramid { stages })
    }
}

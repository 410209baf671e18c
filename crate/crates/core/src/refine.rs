//! Warp-based local-global refinement with a linear attention bottleneck and
//! an uncertainty head.

use evstereo_tensor::{Conv2dParams, Graph, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ConvBn, Init};

pub const ENCODER_WIDTHS: [usize; 3] = [16, 24, 32];
pub const DILATIONS: [usize; 3] = [1, 2, 4];
pub const DILATED_WIDTH: usize = 8;
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Kernelised attention over spatial tokens with an `elu + 1` feature map,
/// evaluated as `phi(Q) (phi(K)^T V)` and added back to the input.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

impl LinearAttention {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mk = |store: &mut ParamStore, n: &str, rng: &mut ChaCha8Rng| {
            Conv2d::new(
                store,
                &format!("{name}.{n}"),
                ch,
                ch,
                1,
                Conv2dParams::default(),
                true,
                Init::Kaiming,
                rng,
            )
        };
        Self {
            q: mk(store, "q", rng),
            k: mk(store, "k", rng),
            v: mk(store, "v", rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let attn = linear_attention(&mut g.tape, q, k, v)?;
        Ok(g.tape.add(x, attn)?)
    }
}

/// `out_i = sum_j phi(q_i).phi(k_j) v_j / sum_j phi(q_i).phi(k_j)` over the
/// `H*W` tokens of `[B, C, H, W]` maps, in `O(N C^2)` order.
pub fn linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (b, c, h, w) = tape.value(q).dims4("linear_attention")?;
    if tape.shape(k) != tape.shape(q) || tape.shape(v) != tape.shape(q) {
        return invalid("linear_attention: q, k and v must share a shape");
    }
    let n = h * w;
    let tokens = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, c, n])?;
        Ok(tape.transpose_last2(x)?)
    };
    let fq = tape.elu_plus_one(q);
    let fk = tape.elu_plus_one(k);
    let fq = tokens(tape, fq)?;
    let fk = tokens(tape, fk)?;
    let vt = tokens(tape, v)?;
    let fk_t = tape.transpose_last2(fk)?;
    let kv = tape.bmm(fk_t, vt)?;
    let num = tape.bmm(fq, kv)?;
    let ksum = tape.sum_axis(fk, 1)?;
    let ksum_t = tape.transpose_last2(ksum)?;
    let den = tape.bmm(fq, ksum_t)?;
    let out = tape.div(num, den)?;
    let out = tape.transpose_last2(out)?;
    Ok(tape.reshape(out, &[b, c, h, w])?)
}

/// Parallel dilated 3x3 convolutions, summed, then SiLU.
#[derive(Clone, Debug)]
pub struct DilatedBlock {
    branches: Vec<Conv2d>,
}

impl DilatedBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let branches = DILATIONS
            .iter()
            .map(|&d| {
                Conv2d::new(
                    store,
                    &format!("{name}.d{d}"),
                    in_ch,
                    out_ch,
                    3,
                    Conv2dParams::same(3, d),
                    true,
                    Init::Kaiming,
                    rng,
                )
            })
            .collect();
        Self { branches }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for conv in &self.branches {
            let y = conv.forward(g, x)?;
            acc = Some(match acc {
                Some(a) => g.tape.add(a, y)?,
                None => y,
            });
        }
        Ok(g.tape.silu(acc.expect("at least one branch")))
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub disparity: Var,
    pub log_variance: Var,
    pub warped: Var,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    enc: Vec<ConvBn>,
    lab: LinearAttention,
    dec: Vec<ConvBn>,
    dilated: DilatedBlock,
    residual_head: Conv2d,
    log_var_head: Conv2d,
    pub max_disparity: usize,
}

impl Refiner {
    pub fn new(
        store: &mut ParamStore,
        rep_channels: usize,
        max_disparity: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let same = Conv2dParams::same(3, 1);
        let [e0, e1, e2] = ENCODER_WIDTHS;
        let in_ch = 3 * rep_channels + 1;
        let enc = vec![
            ConvBn::new(store, "refine.enc0", in_ch, e0, 3, same, true, rng),
            ConvBn::new(store, "refine.enc1", e0, e1, 3, same, true, rng),
            ConvBn::new(store, "refine.enc2", e1, e2, 3, same, true, rng),
        ];
        let lab = LinearAttention::new(store, "refine.lab", e2, rng);
        let dec = vec![
            ConvBn::new(store, "refine.dec1", e2 + e1, e1, 3, same, true, rng),
            ConvBn::new(store, "refine.dec0", e1 + e0, e0, 3, same, true, rng),
        ];
        let dilated = DilatedBlock::new(store, "refine.dilated", e0, DILATED_WIDTH, rng);
        let residual_head = Conv2d::new(
            store,
            "refine.residual",
            DILATED_WIDTH,
            1,
            3,
            same,
            true,
            Init::Zeros,
            rng,
        );
        let log_var_head = Conv2d::new(
            store,
            "refine.log_var",
            DILATED_WIDTH,
            1,
            3,
            same,
            true,
            Init::Zeros,
            rng,
        );
        Self {
            enc,
            lab,
            dec,
            dilated,
            residual_head,
            log_var_head,
            max_disparity,
        }
    }

    /// `init_disp` is `[B,1,H,W]` in full-resolution pixels; the
    /// representations are `[B,C,H,W]` with `H` and `W` divisible by 4.
    pub fn forward(
        &self,
        g: &mut Graph,
        init_disp: Var,
        left: Var,
        right: Var,
    ) -> Result<RefineOutput> {
        let (b, _, h, w) = g.tape.value(left).dims4("refine")?;
        if g.tape.shape(right) != g.tape.shape(left) {
            return invalid(format!(
                "refine: left {:?} and right {:?} differ",
                g.tape.shape(left),
                g.tape.shape(right)
            ));
        }
        if g.tape.shape(init_disp) != [b, 1, h, w] {
            return invalid(format!(
                "refine: disparity {:?} does not match representation {h}x{w}",
                g.tape.shape(init_disp)
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return invalid(format!("refine: {h}x{w} must be divisible by 4"));
        }
        let t = &mut g.tape;
        let (warped, _) = t.grid_warp(right, init_disp)?;
        let diff = t.sub(left, warped)?;
        let norm = t.scale(init_disp, 1.0 / self.max_disparity as f64);
        let x = t.concat(&[left, warped, diff, norm], 1)?;

        let s0 = self.enc[0].forward(g, x)?;
        let p = g.tape.max_pool2d(s0, 2, 2)?;
        let s1 = self.enc[1].forward(g, p)?;
        let p = g.tape.max_pool2d(s1, 2, 2)?;
        let bottleneck = self.enc[2].forward(g, p)?;
        let bottleneck = self.lab.forward(g, bottleneck)?;

        let up = g.tape.upsample_bilinear(bottleneck, h / 2, w / 2)?;
        let cat = g.tape.concat(&[up, s1], 1)?;
        let d1 = self.dec[0].forward(g, cat)?;
        let up = g.tape.upsample_bilinear(d1, h, w)?;
        let cat = g.tape.concat(&[up, s0], 1)?;
        let d0 = self.dec[1].forward(g, cat)?;
        let feat = self.dilated.forward(g, d0)?;

        let residual = self.residual_head.forward(g, feat)?;
        let disp = g.tape.add(init_disp, residual)?;
        let disparity = g.tape.clamp(disp, 0.0, (self.max_disparity - 1) as f64);
        let lv = self.log_var_head.forward(g, feat)?;
        let log_variance = g.tape.clamp(lv, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        Ok(RefineOutput {
            disparity,
            log_variance,
            warped,
        })
    }
}

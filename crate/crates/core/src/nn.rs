//! Parameterised layers bound to a [`ParamStore`].

use evstereo_tensor::{
    BnUpdate, Conv2dParams, Graph, ParamId, ParamKind, ParamStore, Tensor, Var, BN_EPS,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform Kaiming (fan-in) scaling for ReLU networks.
    Kaiming,
    Zeros,
}

fn init_weight(shape: [usize; 4], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Kaiming => {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        params: Conv2dParams,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_weight([out_ch, in_ch, kernel, kernel], init, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros([out_ch]),
                ParamKind::Trainable,
            )
        });
        Self {
            weight,
            bias,
            params,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.tape.conv2d(x, w, b, self.params)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::ones([ch]),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros([ch]),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros([ch]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones([ch]),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let params = g.params();
        let (rm, rv) = (
            params.get(self.running_mean).data(),
            params.get(self.running_var).data(),
        );
        let mode = g.mode();
        let (y, stats) = g.tape.batch_norm2d(x, gamma, beta, rm, rv, mode, BN_EPS)?;
        if let Some(stats) = stats {
            g.push_bn_update(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        params: Conv2dParams,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                params,
                false,
                Init::Kaiming,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.tape.relu(y) } else { y })
    }
}

/// 3x3 deformable convolution whose per-tap offsets are predicted from the
/// input by a zero-initialised 3x3 convolution.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub offset: Conv2d,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
}

impl DeformConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        params: Conv2dParams,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let offset = Conv2d::new(
            store,
            &format!("{name}.offset"),
            in_ch,
            18,
            3,
            params,
            true,
            Init::Zeros,
            rng,
        );
        let weight = store.add(
            format!("{name}.weight"),
            init_weight([out_ch, in_ch, 3, 3], init, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros([out_ch]),
                ParamKind::Trainable,
            )
        });
        Self {
            offset,
            weight,
            bias,
            params,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let off = self.offset.forward(g, x)?;
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.tape.deform_conv2d(x, off, w, b, self.params)?)
    }
}

#[derive(Clone, Debug)]
pub enum AnyConv {
    Plain(Conv2d),
    Deform(DeformConv2d),
}

impl AnyConv {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            AnyConv::Plain(c) => c.forward(g, x),
            AnyConv::Deform(c) => c.forward(g, x),
        }
    }
}

/// Basic residual block: (conv-BN-ReLU, conv-BN) + skip, then ReLU. A
/// projection (1x1 conv + BN) is used on the skip path when the shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: AnyConv,
    bn1: BatchNorm2d,
    conv2: AnyConv,
    bn2: BatchNorm2d,
    skip: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        deformable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p1 = Conv2dParams::new(stride, 1, 1);
        let p2 = Conv2dParams::same(3, 1);
        let make =
            |store: &mut ParamStore, n: &str, i: usize, p: Conv2dParams, rng: &mut ChaCha8Rng| {
                if deformable {
                    AnyConv::Deform(DeformConv2d::new(
                        store,
                        n,
                        i,
                        out_ch,
                        p,
                        false,
                        Init::Kaiming,
                        rng,
                    ))
                } else {
                    AnyConv::Plain(Conv2d::new(
                        store,
                        n,
                        i,
                        out_ch,
                        3,
                        p,
                        false,
                        Init::Kaiming,
                        rng,
                    ))
                }
            };
        let conv1 = make(store, &format!("{name}.conv1"), in_ch, p1, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = make(store, &format!("{name}.conv2"), out_ch, p2, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let skip = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    in_ch,
                    out_ch,
                    1,
                    Conv2dParams::new(stride, 0, 1),
                    false,
                    Init::Kaiming,
                    rng,
                ),
                BatchNorm2d::new(store, &format!("{name}.skip_bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        let s = match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let y = g.tape.add(y, s)?;
        Ok(g.tape.relu(y))
    }
}

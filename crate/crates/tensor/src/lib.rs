//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! convolution, sampling and normalisation primitives a stereo network needs.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::Conv2dParams;
pub use ops::norm::{BatchStats, Mode, BN_EPS, BN_MOMENTUM};
pub use params::{BnUpdate, Graph, ParamId, ParamKind, ParamStore};
pub use tape::{BackwardArgs, Tape, Var};
pub use tensor::Tensor;

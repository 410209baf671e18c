//! Event-camera stereo depth: event stacking, a shared residual encoder,
//! correlation cost pyramids, deformable aggregation, soft-argmax disparity,
//! warp-based refinement with an uncertainty head, losses and metrics.

pub mod aggregation;
pub mod backbone;
pub mod config;
pub mod cost_volume;
pub mod dataset;
pub mod disparity;
pub mod error;
pub mod eval;
pub mod events;
pub mod gradsuite;
pub mod imageio;
pub mod loss;
pub mod model;
pub mod nn;
pub mod refine;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

//! Layered regression network with reverse-mode gradients for parameters
//! and inputs.

mod builder;
mod model;
pub mod ops;
mod train;

pub use builder::ModelBuilder;
pub use model::{Gradients, Layer, LayerKind, ModelGraph, Prepared, ScoreRange, Trace};
pub use ops::{conv_out_size, Activation, ConvGeometry};
pub use train::{fit_score_range, mse, train, Optimizer, TrainConfig, TrainReport, NT_FD_STEP};

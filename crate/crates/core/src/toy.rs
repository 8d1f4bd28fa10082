//! The small reference CNN used for desk-scale experiments.

use crate::error::Result;
use crate::nn::{Activation, LayerKind, ModelBuilder, ModelGraph, Optimizer, TrainConfig};

pub const TOY_IMAGE_SIZE: usize = 16;

/// Four 3×3 convs (stride 1, 2, 2, 2) with ReLU, global pooling, and a
/// two-layer regression head tagged as fresh.
pub fn toy_model(seed: u64) -> Result<ModelGraph> {
    toy_model_sized(TOY_IMAGE_SIZE, seed)
}

/// [`toy_model`] for `size×size` inputs; global pooling makes the head size-independent.
pub fn toy_model_sized(size: usize, seed: u64) -> Result<ModelGraph> {
    ModelBuilder::new(vec![3, size, size], seed)
        .conv(3, 8, 3, 1, 1)
        .activation(Activation::Relu)
        .conv(8, 16, 3, 2, 1)
        .activation(Activation::Relu)
        .conv(16, 32, 3, 2, 1)
        .activation(Activation::Relu)
        .conv(32, 32, 3, 2, 1)
        .activation(Activation::Relu)
        .layer(LayerKind::GlobalAvgPool)
        .head()
        .dense(32, 16)
        .activation(Activation::Relu)
        .dense(16, 1)
        .build()
}

pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 30, lr: 3e-3, optimizer: Optimizer::default(), nt_lambda: 0.0, batch_size: 16, seed }
}

use super::model::{Layer, LayerKind, ModelGraph};
use super::ops::Activation;
use crate::error::Result;
use crate::rng::{normal_vec, seeded, Rng};
use crate::tensor::Tensor;

/// Appends layers with He-normal weights and zero biases.
pub struct ModelBuilder {
    model: ModelGraph,
    rng: Rng,
    mark_fresh: bool,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>, seed: u64) -> Self {
        Self { model: ModelGraph::new(input_shape), rng: seeded(seed), mark_fresh: false }
    }

    /// Layers added after this call are tagged as not pre-trained.
    pub fn head(mut self) -> Self {
        self.mark_fresh = true;
        self
    }

    fn push(&mut self, kind: LayerKind) -> String {
        let name = format!("l{}", self.model.layers.len());
        let mut layer = Layer::new(name.clone(), kind);
        layer.fresh = self.mark_fresh;
        self.model.layers.push(layer);
        name
    }

    pub fn conv(mut self, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        self.conv_dilated(in_channels, out_channels, kernel, stride, padding, 1);
        self
    }

    pub fn conv_dilated(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) {
        let kind = LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, dilation };
        let name = self.push(kind);
        let fan_in = in_channels * kernel * kernel;
        let w = normal_vec(&mut self.rng, out_channels * fan_in, (2.0 / fan_in as f64).sqrt());
        self.model.params.insert(format!("{name}.weight"), Tensor::from_parts(vec![out_channels, in_channels, kernel, kernel], w));
        self.model.params.insert(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
    }

    pub fn dense(mut self, inputs: usize, outputs: usize) -> Self {
        let name = self.push(LayerKind::Dense { inputs, outputs });
        let w = normal_vec(&mut self.rng, outputs * inputs, (1.0 / inputs as f64).sqrt());
        self.model.params.insert(format!("{name}.weight"), Tensor::from_parts(vec![outputs, inputs], w));
        self.model.params.insert(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        self
    }

    pub fn activation(mut self, act: Activation) -> Self {
        self.push(LayerKind::from_activation(act));
        self
    }

    pub fn layer(mut self, kind: LayerKind) -> Self {
        self.push(kind);
        self
    }

    /// Overwrites a parameter tensor by id (e.g. `"l0.weight"`).
    pub fn with_param(mut self, id: &str, value: Tensor) -> Self {
        self.model.params.insert(id.to_string(), value);
        self
    }

    pub fn build(self) -> Result<ModelGraph> {
        self.model.validate()?;
        Ok(self.model)
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, ConvGeometry};
use crate::cayley::{robust_block_backward, robust_block_forward, CayleyOperator, RobustBlockTrace};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer type plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, dilation: usize },
    Dense { inputs: usize, outputs: usize },
    Relu,
    Elu,
    Silu,
    Gelu,
    AdaptiveSquarePool,
    /// Non-overlapping `kernel×kernel` average.
    AvgPool { kernel: usize },
    GlobalAvgPool,
    Flatten,
    RobustBlock { channels: usize, mid_channels: usize, size: usize, kernel: usize },
}

impl LayerKind {
    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerKind::Relu => Some(Activation::Relu),
            LayerKind::Elu => Some(Activation::Elu),
            LayerKind::Silu => Some(Activation::Silu),
            LayerKind::Gelu => Some(Activation::Gelu),
            _ => None,
        }
    }

    pub fn from_activation(act: Activation) -> Self {
        match act {
            Activation::Relu => LayerKind::Relu,
            Activation::Elu => LayerKind::Elu,
            Activation::Silu => LayerKind::Silu,
            Activation::Gelu => LayerKind::Gelu,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. })
    }

    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerKind::Conv2d { stride, padding, dilation, .. } => Some(ConvGeometry { stride, padding, dilation }),
            _ => None,
        }
    }

    /// Expected shapes of the owned parameter tensors, in `param_ids` order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerKind::RobustBlock { channels, mid_channels, kernel, .. } => {
                vec![vec![mid_channels, channels], vec![channels, channels, kernel, kernel]]
            }
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape (the static shape pass).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = || -> Result<(usize, usize, usize)> {
            match input[..] {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Config(format!("expected a C×H×W input, got {input:?}"))),
            }
        };
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, dilation } => {
                let (c, h, w) = chw()?;
                if c != in_channels {
                    return Err(Error::Config(format!("expects {in_channels} input channels, got {c}")));
                }
                Ok(vec![
                    out_channels,
                    ops::conv_out_size(h, kernel, padding, stride, dilation)?,
                    ops::conv_out_size(w, kernel, padding, stride, dilation)?,
                ])
            }
            LayerKind::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != inputs {
                    return Err(Error::Config(format!("expects a flat input of length {inputs}, got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerKind::Relu | LayerKind::Elu | LayerKind::Silu | LayerKind::Gelu => Ok(input.to_vec()),
            LayerKind::AdaptiveSquarePool => {
                let (c, h, w) = chw()?;
                Ok(vec![c, h.min(w), h.min(w)])
            }
            LayerKind::AvgPool { kernel } => {
                let (c, h, w) = chw()?;
                if kernel == 0 || h < kernel || w < kernel {
                    return Err(Error::Config(format!("avg_pool({kernel}) cannot pool {h}x{w}")));
                }
                Ok(vec![c, h / kernel, w / kernel])
            }
            LayerKind::GlobalAvgPool => Ok(vec![chw()?.0]),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::RobustBlock { channels, mid_channels, size, .. } => {
                let (c, h, w) = chw()?;
                if c != channels || h.min(w) != size {
                    return Err(Error::Config(format!(
                        "block built for {channels} channels at size {size}, got {input:?}"
                    )));
                }
                if channels < 2 || mid_channels != channels / 2 {
                    return Err(Error::Config(format!("block channel split {channels}->{mid_channels} is invalid")));
                }
                Ok(vec![channels, size, size])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub param_ids: Vec<String>,
    /// Not pre-trained: RobustBlock internals and the regression head.
    #[serde(default)]
    pub fresh: bool,
    /// Output channels held at zero by pruning.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_channels: Vec<usize>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let name = name.into();
        let param_ids = match kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => vec![format!("{name}.weight"), format!("{name}.bias")],
            LayerKind::RobustBlock { .. } => vec![format!("{name}.reduce"), format!("{name}.cayley")],
            _ => Vec::new(),
        };
        Self { name, kind, param_ids, fresh: false, masked_channels: Vec::new() }
    }

    pub fn fresh(mut self) -> Self {
        self.fresh = true;
        self
    }
}

/// Min/max of training-set predictions, used for score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Config(format!("score range needs min < max, got ({min}, {max})")));
        }
        Ok(Self { min, max })
    }
}

/// Ordered layers plus named parameter tensors; maps a `C×H×W` image to a score.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub params: BTreeMap<String, Tensor>,
    pub score_range: Option<ScoreRange>,
}

/// Gradients of the score.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub by_param: BTreeMap<String, Tensor>,
    pub by_input: Tensor,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self { input_shape, layers: Vec::new(), params: BTreeMap::new(), score_range: None }
    }

    /// Shape entering each layer, followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.kind.output_shape(shapes.last().expect("non-empty")).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("layer {i} ({}): {m}", layer.name)),
                other => other,
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Shape pass plus parameter presence/shape checks; the output must be a scalar.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        if shapes.last().map(Vec::as_slice) != Some(&[1][..]) {
            return Err(Error::Config(format!("model output must have shape [1], got {:?}", shapes.last())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let expected = layer.kind.param_shapes();
            if expected.len() != layer.param_ids.len() {
                return Err(Error::Config(format!("layer {i} ({}) declares the wrong number of parameters", layer.name)));
            }
            for (id, shape) in layer.param_ids.iter().zip(&expected) {
                let t = self.params.get(id).ok_or_else(|| Error::Config(format!("layer {i}: missing parameter {id}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Config(format!("parameter {id} has shape {:?}, expected {shape:?}", t.shape())));
                }
            }
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Indices of conv layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.is_conv()).map(|(i, _)| i).collect()
    }

    fn param(&self, id: &str) -> &Tensor {
        &self.params[id]
    }

    /// Validates and precomputes per-layer operators (the Cayley blocks).
    pub fn prepare(&self) -> Result<Prepared<'_>> {
        self.validate()?;
        let mut cayley = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cayley.push(match layer.kind {
                LayerKind::RobustBlock { size, .. } => Some(CayleyOperator::new(self.param(&layer.param_ids[1]), size)?),
                _ => None,
            });
        }
        Ok(Prepared { model: self, cayley })
    }

    pub fn forward(&self, x: &Tensor) -> Result<f64> {
        self.prepare()?.forward(x)
    }

    pub fn backward(&self, x: &Tensor) -> Result<(f64, Gradients)> {
        self.prepare()?.backward(x)
    }

    /// Zeroes the weights and bias of every masked output channel.
    pub fn apply_masks(&mut self) {
        for layer in &self.layers {
            if layer.masked_channels.is_empty() {
                continue;
            }
            let (w_id, b_id) = (&layer.param_ids[0], &layer.param_ids[1]);
            if let Some(w) = self.params.get_mut(w_id) {
                let per = w.len() / w.shape()[0];
                for &ch in &layer.masked_channels {
                    w.data_mut()[ch * per..(ch + 1) * per].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            if let Some(b) = self.params.get_mut(b_id) {
                for &ch in &layer.masked_channels {
                    b.data_mut()[ch] = 0.0;
                }
            }
        }
    }
}

/// A model with its derived operators materialized; reused across images.
pub struct Prepared<'a> {
    model: &'a ModelGraph,
    cayley: Vec<Option<CayleyOperator>>,
}

/// Per-layer values recorded by the forward pass.
pub struct Trace {
    /// `activations[i]` enters layer `i`; the last entry is the output.
    pub activations: Vec<Tensor>,
    blocks: Vec<Option<RobustBlockTrace>>,
}

impl Trace {
    pub fn score(&self) -> f64 {
        self.activations.last().expect("non-empty trace").data()[0]
    }
}

impl<'a> Prepared<'a> {
    pub fn model(&self) -> &'a ModelGraph {
        self.model
    }

    pub fn forward(&self, x: &Tensor) -> Result<f64> {
        Ok(self.trace(x)?.score())
    }

    pub fn trace(&self, x: &Tensor) -> Result<Trace> {
        let m = self.model;
        if x.shape() != m.input_shape.as_slice() {
            return Err(Error::Shape(format!("model expects input {:?}, got {:?}", m.input_shape, x.shape())));
        }
        let mut activations = Vec::with_capacity(m.layers.len() + 1);
        let mut blocks = Vec::with_capacity(m.layers.len());
        activations.push(x.clone());
        for (i, layer) in m.layers.iter().enumerate() {
            let input = activations.last().expect("non-empty");
            let mut block = None;
            let out = match &layer.kind {
                LayerKind::Conv2d { .. } => ops::conv2d_forward(
                    input,
                    m.param(&layer.param_ids[0]),
                    m.param(&layer.param_ids[1]),
                    layer.kind.geometry().expect("conv"),
                )?,
                LayerKind::Dense { .. } => {
                    ops::dense_forward(input, m.param(&layer.param_ids[0]), m.param(&layer.param_ids[1]))?
                }
                LayerKind::Relu | LayerKind::Elu | LayerKind::Silu | LayerKind::Gelu => {
                    ops::activation_forward(layer.kind.activation().expect("activation"), input)
                }
                LayerKind::AdaptiveSquarePool => ops::adaptive_square_pool_forward(input)?,
                LayerKind::AvgPool { kernel } => ops::avg_pool_forward(input, *kernel)?,
                LayerKind::GlobalAvgPool => ops::global_avg_pool_forward(input)?,
                LayerKind::Flatten => {
                    let n = input.len();
                    input.clone().reshape(vec![n])?
                }
                LayerKind::RobustBlock { .. } => {
                    let op = self.cayley[i].as_ref().expect("prepared block");
                    let t = robust_block_forward(m.param(&layer.param_ids[0]), op, input)?;
                    let out = t.output.clone();
                    block = Some(t);
                    out
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            activations.push(out);
            blocks.push(block);
        }
        Ok(Trace { activations, blocks })
    }

    /// Score and its gradients with respect to input and all parameters.
    pub fn backward(&self, x: &Tensor) -> Result<(f64, Gradients)> {
        let trace = self.trace(x)?;
        let (by_input, by_param) = self.backprop(&trace, true)?;
        Ok((trace.score(), Gradients { by_param, by_input }))
    }

    /// Score and `∇ₓ f` only (skips parameter gradients).
    pub fn input_gradient(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let trace = self.trace(x)?;
        let (g, _) = self.backprop(&trace, false)?;
        Ok((trace.score(), g))
    }

    fn backprop(&self, trace: &Trace, want_params: bool) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let m = self.model;
        let mut by_param = BTreeMap::new();
        let mut grad = Tensor::filled(vec![1], 1.0);
        for (i, layer) in m.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            grad = match &layer.kind {
                LayerKind::Conv2d { .. } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        input,
                        m.param(&layer.param_ids[0]),
                        layer.kind.geometry().expect("conv"),
                        &grad,
                    )?;
                    if want_params {
                        by_param.insert(layer.param_ids[0].clone(), gw);
                        by_param.insert(layer.param_ids[1].clone(), gb);
                    }
                    gx
                }
                LayerKind::Dense { .. } => {
                    let (gx, gw, gb) = ops::dense_backward(input, m.param(&layer.param_ids[0]), &grad)?;
                    if want_params {
                        by_param.insert(layer.param_ids[0].clone(), gw);
                        by_param.insert(layer.param_ids[1].clone(), gb);
                    }
                    gx
                }
                LayerKind::Relu | LayerKind::Elu | LayerKind::Silu | LayerKind::Gelu => {
                    ops::activation_backward(layer.kind.activation().expect("activation"), input, &grad)
                }
                LayerKind::AdaptiveSquarePool => ops::adaptive_square_pool_backward(input.shape(), &grad)?,
                LayerKind::AvgPool { kernel } => ops::avg_pool_backward(input.shape(), *kernel, &grad),
                LayerKind::GlobalAvgPool => ops::global_avg_pool_backward(input.shape(), &grad),
                LayerKind::Flatten => grad.reshape(input.shape().to_vec())?,
                LayerKind::RobustBlock { .. } => {
                    let op = self.cayley[i].as_ref().expect("prepared block");
                    let bt = trace.blocks[i].as_ref().expect("block trace");
                    let (gx, gr, gk) = robust_block_backward(m.param(&layer.param_ids[0]), op, input, bt, &grad)?;
                    if want_params {
                        by_param.insert(layer.param_ids[0].clone(), gr);
                        by_param.insert(layer.param_ids[1].clone(), gk);
                    }
                    gx
                }
            };
        }
        Ok((grad, by_param))
    }
}

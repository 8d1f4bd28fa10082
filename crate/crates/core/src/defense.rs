//! Design-based defense: RobustBlock insertion, channel pruning, fine-tuning,
//! and activation replacement.

use serde::{Deserialize, Serialize};

use crate::cayley::insert_robust_block;
use crate::data::{encode_checkpoint, sha256_hex};
use crate::error::{Error, Result};
use crate::nn::{train, Activation, LayerKind, ModelGraph, TrainConfig, TrainReport};
use crate::rng::derive_seed;
use crate::spectral::{placement_scan, recommend};
use crate::tensor::Tensor;

pub const DEFAULT_PRUNE_RATE: f64 = 0.1;
pub const DEFAULT_FINE_TUNE_EPOCHS: usize = 5;
/// Fine-tuning runs at the training learning rate divided by this.
pub const FINE_TUNE_LR_DIVISOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub criterion: PruneCriterion,
    /// Fraction of in-scope output channels to mask, in `[0, 1)`.
    pub rate: f64,
    /// Indices of the conv layers eligible for pruning.
    pub scope: Vec<usize>,
}

impl PruneConfig {
    /// Every conv layer of `model` is in scope.
    pub fn all_convs(model: &ModelGraph, rate: f64, criterion: PruneCriterion) -> Self {
        Self { criterion, rate, scope: model.conv_indices() }
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!("prune rate must be in [0, 1), got {}", self.rate)));
        }
        if self.rate > 0.0 && self.scope.is_empty() {
            return Err(Error::Config("prune scope is empty".into()));
        }
        for &i in &self.scope {
            match model.layers.get(i) {
                Some(l) if l.kind.is_conv() => {}
                Some(l) => return Err(Error::Config(format!("layer {i} ({}) is not a conv", l.name))),
                None => return Err(Error::Config(format!("layer {i} does not exist"))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub layer_index: usize,
    pub channel: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer_index: usize,
    pub layer_name: String,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Newly masked channels, per layer in scope order.
    pub masks: Vec<LayerMask>,
    pub total_masked: usize,
    /// Importance of every in-scope channel before masking.
    pub criterion_values: Vec<ChannelScore>,
}

fn channel_importance(w: &Tensor, criterion: PruneCriterion) -> Vec<f64> {
    let per = w.len() / w.shape()[0];
    w.data()
        .chunks(per)
        .map(|slice| match criterion {
            PruneCriterion::L1 => slice.iter().map(|v| v.abs()).sum(),
            PruneCriterion::L2 => slice.iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect()
}

/// Number of channels masked out of `n` at `rate`.
pub fn prune_count(rate: f64, n: usize) -> usize {
    // The slack absorbs products such as 0.29·100 = 28.999…
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Zero-masks the `floor(rate·N)` in-scope output channels with the smallest
/// filter norm, across all in-scope layers at once.
pub fn prune_channels(model: &ModelGraph, cfg: &PruneConfig) -> Result<(ModelGraph, PruneReport)> {
    model.validate()?;
    cfg.validate(model)?;
    if cfg.rate == 0.0 {
        return Ok((model.clone(), PruneReport::default()));
    }
    let mut scores = Vec::new();
    for &i in &cfg.scope {
        let w = &model.params[&model.layers[i].param_ids[0]];
        for (channel, value) in channel_importance(w, cfg.criterion).into_iter().enumerate() {
            scores.push(ChannelScore { layer_index: i, channel, value });
        }
    }
    let mut order: Vec<&ChannelScore> = scores.iter().collect();
    order.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.layer_index.cmp(&b.layer_index)).then(a.channel.cmp(&b.channel)));
    let k = prune_count(cfg.rate, scores.len());

    let mut out = model.clone();
    let mut masks = Vec::new();
    for &i in &cfg.scope {
        let mut channels: Vec<usize> = order[..k].iter().filter(|s| s.layer_index == i).map(|s| s.channel).collect();
        channels.sort_unstable();
        let layer = &mut out.layers[i];
        let LayerKind::Conv2d { out_channels, .. } = layer.kind else { unreachable!("scope validated") };
        let mut merged = layer.masked_channels.clone();
        merged.extend(&channels);
        merged.sort_unstable();
        merged.dedup();
        if merged.len() >= out_channels {
            return Err(Error::Pruning(format!("rate {} would mask every channel of layer {i} ({})", cfg.rate, layer.name)));
        }
        layer.masked_channels = merged;
        if !channels.is_empty() {
            masks.push(LayerMask { layer_index: i, layer_name: layer.name.clone(), channels });
        }
    }
    out.apply_masks();
    Ok((out, PruneReport { masks, total_masked: k, criterion_values: scores }))
}

/// Training config for fine-tuning after a modification.
pub fn fine_tune_config(base: &TrainConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, lr: base.lr / FINE_TUNE_LR_DIVISOR, seed, ..*base }
}

/// Retrains with masks held at zero; `score_range` is refit at the end.
pub fn fine_tune(model: &ModelGraph, images: &[Tensor], labels: &[f64], cfg: &TrainConfig) -> Result<(ModelGraph, TrainReport)> {
    let mut out = model.clone();
    let report = train(&mut out, images, labels, cfg)?;
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    /// Every ReLU.
    Full,
    /// Only ReLUs in layers that were not pre-trained.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaceReport {
    pub replaced: Vec<usize>,
    pub warning: Option<String>,
}

pub fn replace_activations(model: &ModelGraph, mode: ReplaceMode, act: Activation) -> Result<(ModelGraph, ReplaceReport)> {
    if act == Activation::Relu {
        return Err(Error::Config("replacement activation must be smooth (elu, silu, or gelu)".into()));
    }
    let mut out = model.clone();
    if mode == ReplaceMode::Partial && !out.layers.iter().any(|l| l.fresh) {
        let warning = "model has no fresh layers; nothing replaced".to_string();
        return Ok((out, ReplaceReport { replaced: Vec::new(), warning: Some(warning) }));
    }
    let mut replaced = Vec::new();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if layer.kind == LayerKind::Relu && (mode == ReplaceMode::Full || layer.fresh) {
            layer.kind = LayerKind::from_activation(act);
            replaced.push(i);
        }
    }
    Ok((out, ReplaceReport { replaced, warning: None }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefendOptions {
    /// Insert before this conv layer; `None` uses the placement recommendation.
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default)]
    pub skip_block: bool,
    #[serde(default = "default_rate")]
    pub prune_rate: f64,
    #[serde(default)]
    pub criterion: PruneCriterion,
    #[serde(default = "default_epochs")]
    pub fine_tune_epochs: usize,
    /// The config the model was trained with; fine-tuning derives from it.
    pub train: TrainConfig,
    pub seed: u64,
}

fn default_rate() -> f64 {
    DEFAULT_PRUNE_RATE
}

fn default_epochs() -> usize {
    DEFAULT_FINE_TUNE_EPOCHS
}

impl DefendOptions {
    pub fn new(train: TrainConfig, seed: u64) -> Self {
        Self {
            position: None,
            skip_block: false,
            prune_rate: DEFAULT_PRUNE_RATE,
            criterion: PruneCriterion::L2,
            fine_tune_epochs: DEFAULT_FINE_TUNE_EPOCHS,
            train,
            seed,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("options serialize"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseProvenance {
    pub options: DefendOptions,
    pub options_hash: String,
    pub block_position: Option<usize>,
    pub block_seed: u64,
    pub masks: Vec<LayerMask>,
    pub fine_tune: Option<TrainConfig>,
    pub fine_tune_loss: Vec<f64>,
    pub data_hash: String,
    pub input_model_hash: String,
    pub output_model_hash: String,
}

pub fn model_hash(model: &ModelGraph) -> Result<String> {
    Ok(sha256_hex(&encode_checkpoint(model)?))
}

/// Hash of training images and labels, in order.
pub fn data_hash(images: &[Tensor], labels: &[f64]) -> String {
    let mut bytes = Vec::new();
    for (x, l) in images.iter().zip(labels) {
        x.data().iter().chain(std::iter::once(l)).for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    sha256_hex(&bytes)
}

/// Insert → prune → fine-tune. Fine-tuning is skipped when nothing changed.
pub fn defend(model: &ModelGraph, images: &[Tensor], labels: &[f64], opts: &DefendOptions) -> Result<(ModelGraph, DefenseProvenance)> {
    let input_model_hash = model_hash(model).map_err(|e| e.in_stage("input"))?;
    let block_seed = derive_seed(opts.seed, 0);
    let tune_seed = derive_seed(opts.seed, 1);

    let (mut current, block_position) = if opts.skip_block {
        (model.clone(), None)
    } else {
        let position = match opts.position {
            Some(p) => p,
            None => recommend(&placement_scan(model).map_err(|e| e.in_stage("placement"))?)
                .ok_or_else(|| Error::Config("model has no conv layer to place a block at".into()).in_stage("placement"))?,
        };
        let m = insert_robust_block(model, position, block_seed).map_err(|e| e.in_stage("insert"))?;
        (m, Some(position))
    };

    let cfg = PruneConfig::all_convs(&current, opts.prune_rate, opts.criterion);
    let (pruned, prune_report) = prune_channels(&current, &cfg).map_err(|e| e.in_stage("prune"))?;
    current = pruned;

    let changed = block_position.is_some() || prune_report.total_masked > 0;
    let (fine_tune_cfg, fine_tune_loss) = if changed && opts.fine_tune_epochs > 0 {
        let tcfg = fine_tune_config(&opts.train, opts.fine_tune_epochs, tune_seed);
        let (m, report) = fine_tune(&current, images, labels, &tcfg).map_err(|e| e.in_stage("fine-tune"))?;
        current = m;
        (Some(tcfg), report.loss_curve)
    } else {
        (None, Vec::new())
    };

    let provenance = DefenseProvenance {
        options: opts.clone(),
        options_hash: opts.hash(),
        block_position,
        block_seed,
        masks: prune_report.masks,
        fine_tune: fine_tune_cfg,
        fine_tune_loss,
        data_hash: if fine_tune_cfg.is_some() { data_hash(images, labels) } else { String::new() },
        input_model_hash,
        output_model_hash: model_hash(&current).map_err(|e| e.in_stage("output"))?,
    };
    Ok((current, provenance))
}

/// Re-runs a recorded defense and checks that it reproduces the recorded model.
pub fn replay_defense(model: &ModelGraph, images: &[Tensor], labels: &[f64], record: &DefenseProvenance) -> Result<ModelGraph> {
    if model_hash(model)? != record.input_model_hash {
        return Err(Error::Input("input model differs from the recorded one".into()));
    }
    let (out, again) = defend(model, images, labels, &record.options)?;
    if again.output_model_hash != record.output_model_hash {
        return Err(Error::Input(format!(
            "replay produced model {} but the record has {}",
            again.output_model_hash, record.output_model_hash
        )));
    }
    Ok(out)
}

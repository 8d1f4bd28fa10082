//! Mini-batch training with MSE loss and an optional input-gradient-norm (NT)
//! penalty.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ModelGraph, ScoreRange};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Step along the normalized input gradient used to differentiate the NT penalty.
pub const NT_FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub nt_lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, optimizer: Optimizer::default(), nt_lambda: 0.0, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub score_range: ScoreRange,
}

struct SampleGrad {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
}

/// Trains `model` in place. Masked channels are re-zeroed after every update
/// and `score_range` is reset from the final training-set predictions.
pub fn train(model: &mut ModelGraph, images: &[Tensor], labels: &[f64], cfg: &TrainConfig) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Input(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Input(format!("labels must lie in [0, 1], found {bad}")));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.nt_lambda >= 0.0) {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    model.validate()?;
    model.apply_masks();

    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut state = OptimizerState::default();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<SampleGrad> = {
                let prepared = model.prepare().map_err(|e| diverged(e, epoch))?;
                batch
                    .par_iter()
                    .map(|&i| sample_gradient(&prepared, &images[i], labels[i], cfg.nt_lambda))
                    .collect::<Result<_>>()
                    .map_err(|e| diverged(e, epoch))?
            };
            // Fixed-order reduction keeps results independent of thread count.
            let scale = 1.0 / batch.len() as f64;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for s in &per_sample {
                epoch_loss += s.loss;
                for (id, g) in &s.grads {
                    match total.get_mut(id) {
                        Some(t) => t.axpy(1.0, g)?,
                        None => {
                            total.insert(id.clone(), g.clone());
                        }
                    }
                }
            }
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            state.step(model, &total, cfg);
            model.apply_masks();
        }
        let mean = epoch_loss / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        loss_curve.push(mean);
    }

    let score_range = fit_score_range(model, images)?;
    model.score_range = Some(score_range);
    Ok(TrainReport { loss_curve, score_range })
}

/// Min/max prediction over `images`.
pub fn fit_score_range(model: &ModelGraph, images: &[Tensor]) -> Result<ScoreRange> {
    let prepared = model.prepare()?;
    let preds: Vec<f64> = images.par_iter().map(|x| prepared.forward(x)).collect::<Result<_>>()?;
    let (lo, hi) = preds.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p), b.max(p)));
    ScoreRange::new(lo, hi).map_err(|_| Error::Training(format!("degenerate prediction range ({lo}, {hi})")))
}

/// Mean squared error of predictions against labels.
pub fn mse(model: &ModelGraph, images: &[Tensor], labels: &[f64]) -> Result<f64> {
    let prepared = model.prepare()?;
    let preds: Vec<f64> = images.par_iter().map(|x| prepared.forward(x)).collect::<Result<_>>()?;
    Ok(preds.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / labels.len() as f64)
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

fn sample_gradient(prepared: &super::model::Prepared<'_>, x: &Tensor, label: f64, nt_lambda: f64) -> Result<SampleGrad> {
    let (score, grads) = prepared.backward(x)?;
    let resid = score - label;
    let mut loss = resid * resid;
    let mut out = grads.by_param;
    for g in out.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= 2.0 * resid);
    }
    if nt_lambda > 0.0 {
        let gin = grads.by_input;
        let gnorm = gin.norm_l2();
        loss += nt_lambda * gnorm * gnorm;
        if gnorm > 0.0 {
            // ∇θ‖∇ₓf‖² = 2 (∂²f/∂θ∂x) ∇ₓf, taken as a central difference of
            // parameter gradients along the unit input-gradient direction.
            let dir = gin.scale(1.0 / gnorm);
            let (_, plus) = prepared.backward(&x.add(&dir.scale(NT_FD_STEP))?)?;
            let (_, minus) = prepared.backward(&x.sub(&dir.scale(NT_FD_STEP))?)?;
            let k = nt_lambda * 2.0 * gnorm / (2.0 * NT_FD_STEP);
            for (id, g) in out.iter_mut() {
                let (p, m) = (&plus.by_param[id], &minus.by_param[id]);
                for ((v, a), b) in g.data_mut().iter_mut().zip(p.data()).zip(m.data()) {
                    *v += k * (a - b);
                }
            }
        }
    }
    Ok(SampleGrad { loss, grads: out })
}

#[derive(Default)]
struct OptimizerState {
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    fn step(&mut self, model: &mut ModelGraph, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.t += 1;
        for (id, g) in grads {
            let p = model.params.get_mut(id).expect("gradient for a known parameter");
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= cfg.lr * gv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let m = self.m.entry(id.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(id.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
                    for (((w, gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gv;
                        *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                        *w -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

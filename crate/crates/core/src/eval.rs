//! Clean performance and attacked robustness of a model over a dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, AttackResult};
use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{normalize_pairs, plcc, srocc, RScoreConfig, RobustnessReport, ScorePair};
use crate::nn::ModelGraph;
use crate::tensor::Tensor;

pub fn predict(model: &ModelGraph, images: &[Tensor]) -> Result<Vec<f64>> {
    let prepared = model.prepare()?;
    images.par_iter().map(|x| prepared.forward(x)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub srocc: f64,
    pub plcc: f64,
}

pub fn performance(model: &ModelGraph, images: &[Tensor], labels: &[f64]) -> Result<Performance> {
    let pred = predict(model, images)?;
    Ok(Performance { srocc: srocc(&pred, labels)?, plcc: plcc(&pred, labels)? })
}

/// Hash identifying an attack template together with its ε grid.
pub fn attack_config_hash(template: &AttackConfig, grid: &[f64]) -> String {
    let json = serde_json::to_vec(&(template, grid)).expect("attack config serializes");
    sha256_hex(&json)[..16].to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: RobustnessReport,
    /// Raw attack output for each ε of the grid.
    pub runs: Vec<AttackResult>,
}

/// Attacks `images` at every ε of `grid` (strictly increasing) and scores the
/// normalized clean/attacked pairs. stAdv ignores ε and takes a one-point grid.
pub fn evaluate(
    model: &ModelGraph,
    images: &[Tensor],
    labels: &[f64],
    template: &AttackConfig,
    grid: &[f64],
    rcfg: RScoreConfig,
) -> Result<Evaluation> {
    let range = model.score_range.ok_or_else(|| Error::Normalization("model has no score range; train it first".into()))?;
    if grid.is_empty() {
        return Err(Error::Input("ε grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("ε grid must be strictly increasing".into()));
    }
    let perf = performance(model, images, labels)?;
    let prepared = model.prepare()?;
    let mut runs = Vec::with_capacity(grid.len());
    let mut scored: Vec<(f64, Vec<ScorePair>)> = Vec::with_capacity(grid.len());
    for &eps in grid {
        let cfg = AttackConfig { epsilon: eps, ..*template };
        let result = run_attack(&prepared, images, &cfg)?;
        scored.push((eps, normalize_pairs(&result.pairs(), range)?));
        runs.push(result);
    }
    let report = RobustnessReport::from_runs(&scored, rcfg, perf.srocc, perf.plcc, attack_config_hash(template, grid))?;
    Ok(Evaluation { report, runs })
}

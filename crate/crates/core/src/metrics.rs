//! Correlation, robustness scores, and their aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ScoreRange;

/// Lower bound applied to both sides of the R-Score ratio.
pub const R_SCORE_FLOOR: f64 = 1e-6;
/// ε values are integrated in units of `1/EPS_UNIT`.
pub const EPS_UNIT: f64 = 255.0;
/// Default ε grid, in `[0, 1]` pixel units.
pub const DEFAULT_EPS_GRID: [f64; 5] = [2.0 / 255.0, 4.0 / 255.0, 6.0 / 255.0, 8.0 / 255.0, 10.0 / 255.0];
pub const DEFAULT_DATASET_WEIGHTS: (f64, f64) = (2.0 / 3.0, 1.0 / 3.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub image_id: usize,
    pub clean: f64,
    pub attacked: f64,
}

impl ScorePair {
    pub fn new(image_id: usize, clean: f64, attacked: f64) -> Self {
        Self { image_id, clean, attacked }
    }

    pub fn delta(&self) -> f64 {
        self.attacked - self.clean
    }
}

/// `(s − min) / (max − min)` clamped to `[0, 1]`.
pub fn normalize(scores: &[f64], range: ScoreRange) -> Result<Vec<f64>> {
    let width = range.max - range.min;
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::Normalization(format!("degenerate score range ({}, {})", range.min, range.max)));
    }
    Ok(scores.iter().map(|s| ((s - range.min) / width).clamp(0.0, 1.0)).collect())
}

/// Normalizes both sides of every pair.
pub fn normalize_pairs(pairs: &[ScorePair], range: ScoreRange) -> Result<Vec<ScorePair>> {
    let clean = normalize(&pairs.iter().map(|p| p.clean).collect::<Vec<_>>(), range)?;
    let attacked = normalize(&pairs.iter().map(|p| p.attacked).collect::<Vec<_>>(), range)?;
    Ok(pairs.iter().zip(clean).zip(attacked).map(|((p, c), a)| ScorePair::new(p.image_id, c, a)).collect())
}

fn nonempty(pairs: &[ScorePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Input("no score pairs".into()));
    }
    Ok(())
}

/// Signed mean of `attacked − clean`.
pub fn abs_gain(pairs: &[ScorePair]) -> Result<f64> {
    nonempty(pairs)?;
    Ok(pairs.iter().map(ScorePair::delta).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RScoreConfig {
    pub beta0: f64,
    pub beta1: f64,
    pub log_base: f64,
}

impl Default for RScoreConfig {
    fn default() -> Self {
        Self { beta0: 0.0, beta1: 1.0, log_base: 10.0 }
    }
}

/// Mean of `log(max{β₁ − attacked, clean − β₀} / |attacked − clean|)`, each
/// side floored at [`R_SCORE_FLOOR`].
pub fn r_score(pairs: &[ScorePair], cfg: RScoreConfig) -> Result<f64> {
    nonempty(pairs)?;
    if !(cfg.log_base > 0.0 && cfg.log_base != 1.0) {
        return Err(Error::Input(format!("invalid log base {}", cfg.log_base)));
    }
    let ln_base = cfg.log_base.ln();
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let headroom = (cfg.beta1 - p.attacked).max(p.clean - cfg.beta0).max(R_SCORE_FLOOR);
            let change = p.delta().abs().max(R_SCORE_FLOOR);
            (headroom / change).ln() / ln_base
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Trapezoidal area under `(ε, value)` with ε measured in `1/255` steps.
pub fn auc_over_eps(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Input(format!("AUC needs at least 2 points, got {}", curve.len())));
    }
    if curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Input("ε values must be strictly increasing".into()));
    }
    Ok(curve.windows(2).map(|w| (w[1].0 - w[0].0) * EPS_UNIT * 0.5 * (w[0].1 + w[1].1)).sum())
}

fn correlation_inputs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Correlation(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Correlation(format!("need at least 3 samples, got {}", a.len())));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::Correlation("zero variance".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn plcc(pred: &[f64], labels: &[f64]) -> Result<f64> {
    correlation_inputs(pred, labels)?;
    pearson(pred, labels)
}

pub fn srocc(pred: &[f64], labels: &[f64]) -> Result<f64> {
    correlation_inputs(pred, labels)?;
    pearson(&average_ranks(pred), &average_ranks(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub abs_gain: f64,
    pub r_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// At the largest ε of the curve.
    pub abs_gain: f64,
    pub r_score: f64,
    pub curve: Vec<CurvePoint>,
    /// Present when the curve has at least two points.
    pub abs_gain_auc: Option<f64>,
    pub r_score_auc: Option<f64>,
    pub srocc: f64,
    pub plcc: f64,
    pub dataset_weights: Vec<f64>,
    pub attack_config_hash: String,
}

impl RobustnessReport {
    /// Builds the report from normalized per-ε pairs, sorted by ε.
    pub fn from_runs(
        runs: &[(f64, Vec<ScorePair>)],
        rcfg: RScoreConfig,
        srocc: f64,
        plcc: f64,
        attack_config_hash: String,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Input("no attack runs".into()));
        }
        let curve = runs
            .iter()
            .map(|(eps, pairs)| Ok(CurvePoint { epsilon: *eps, abs_gain: abs_gain(pairs)?, r_score: r_score(pairs, rcfg)? }))
            .collect::<Result<Vec<_>>>()?;
        let last = curve.last().expect("non-empty").clone();
        let (abs_gain_auc, r_score_auc) = curve_aucs(&curve)?;
        Ok(Self {
            abs_gain: last.abs_gain,
            r_score: last.r_score,
            curve,
            abs_gain_auc,
            r_score_auc,
            srocc,
            plcc,
            dataset_weights: vec![1.0],
            attack_config_hash,
        })
    }
}

fn curve_aucs(curve: &[CurvePoint]) -> Result<(Option<f64>, Option<f64>)> {
    if curve.len() < 2 {
        return Ok((None, None));
    }
    let ag: Vec<(f64, f64)> = curve.iter().map(|p| (p.epsilon, p.abs_gain)).collect();
    let rs: Vec<(f64, f64)> = curve.iter().map(|p| (p.epsilon, p.r_score)).collect();
    Ok((Some(auc_over_eps(&ag)?), Some(auc_over_eps(&rs)?)))
}

/// Element-wise `wa·a + wb·b` of all scalars and curves.
pub fn weighted_summary(a: &RobustnessReport, b: &RobustnessReport, weights: (f64, f64)) -> Result<RobustnessReport> {
    let (wa, wb) = weights;
    if !(wa >= 0.0 && wb >= 0.0) || (wa + wb - 1.0).abs() > 1e-12 {
        return Err(Error::Input(format!("weights must be non-negative and sum to 1, got ({wa}, {wb})")));
    }
    let same_grid = a.curve.len() == b.curve.len() && a.curve.iter().zip(&b.curve).all(|(p, q)| p.epsilon == q.epsilon);
    if !same_grid {
        return Err(Error::Input("reports use different ε grids".into()));
    }
    let mix = |x: f64, y: f64| wa * x + wb * y;
    let curve: Vec<CurvePoint> = a
        .curve
        .iter()
        .zip(&b.curve)
        .map(|(p, q)| CurvePoint { epsilon: p.epsilon, abs_gain: mix(p.abs_gain, q.abs_gain), r_score: mix(p.r_score, q.r_score) })
        .collect();
    let (abs_gain_auc, r_score_auc) = curve_aucs(&curve)?;
    Ok(RobustnessReport {
        abs_gain: mix(a.abs_gain, b.abs_gain),
        r_score: mix(a.r_score, b.r_score),
        curve,
        abs_gain_auc,
        r_score_auc,
        srocc: mix(a.srocc, b.srocc),
        plcc: mix(a.plcc, b.plcc),
        dataset_weights: vec![wa, wb],
        attack_config_hash: if a.attack_config_hash == b.attack_config_hash {
            a.attack_config_hash.clone()
        } else {
            format!("{}+{}", a.attack_config_hash, b.attack_config_hash)
        },
    })
}

/// Robustness criterion: the defended model gains less under attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainComparison {
    pub baseline_gain: f64,
    pub defended_gain: f64,
    pub defended_is_more_robust: bool,
}

pub fn compare_gains(baseline_gain: f64, defended_gain: f64) -> GainComparison {
    GainComparison { baseline_gain, defended_gain, defended_is_more_robust: defended_gain < baseline_gain }
}

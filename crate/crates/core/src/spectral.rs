//! Spectral analysis of convolution operators and placement scoring.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cayley::CayleyOperator;
use crate::circulant::{circular_conv, kernel_dft, kernel_dims, materialize};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, svd_small, ComplexMatrix, Svd};
use crate::nn::{LayerKind, ModelGraph};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{idft2, CTensor, Tensor};
use rand::Rng as _;

/// Largest `c·n²` for which the explicit operator matrix is built.
pub const MATERIALIZE_CAP: usize = 4096;
/// An operator counts as amplifying only if `σ₁ > 1 + AMPLIFICATION_SLACK`.
pub const AMPLIFICATION_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    Circular,
    Materialized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpectrum {
    pub spectral_norm: f64,
    pub frobenius_norm: f64,
    /// Unit-norm real input achieving `spectral_norm`.
    pub top_right_singular: Tensor,
    /// Descending singular values of each frequency block; empty when materialized.
    pub per_frequency: Vec<Vec<f64>>,
}

/// A real linear map with a computable spectrum.
pub trait LinearOperator {
    fn input_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn spectrum(&self) -> Result<OperatorSpectrum>;
}

/// Circular convolution of a rank-4 kernel on an `n×n` grid.
#[derive(Clone, Debug)]
pub struct CircularConv {
    pub kernel: Tensor,
    pub size: usize,
}

impl LinearOperator for CircularConv {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.kernel.shape()[1], self.size, self.size]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        circular_conv(&self.kernel, x)
    }

    fn spectrum(&self) -> Result<OperatorSpectrum> {
        conv_spectrum(&self.kernel, self.size, Semantics::Circular)
    }
}

impl LinearOperator for CayleyOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.channels(), self.size(), self.size()]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        CayleyOperator::apply(self, x)
    }

    fn spectrum(&self) -> Result<OperatorSpectrum> {
        let blocks: Vec<ComplexMatrix> = self.frequencies().cloned().collect();
        block_spectrum(&blocks, self.size())
    }
}

/// Dense real matrix acting on flat vectors.
#[derive(Clone, Debug)]
pub struct MatrixOperator {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixOperator {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `self · other`
    pub fn compose(&self, other: &MatrixOperator) -> Result<MatrixOperator> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("cannot compose {}x{} with {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for j in 0..other.cols {
                    out[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        MatrixOperator::new(self.rows, other.cols, out)
    }

    fn svd(&self) -> Result<Svd> {
        svd_small(&ComplexMatrix::from_real(self.rows, self.cols, &self.data)?)
    }
}

impl LinearOperator for MatrixOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape(&[self.cols])?;
        let y = (0..self.rows).map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(x.data()).map(|(a, b)| a * b).sum()).collect();
        Tensor::new(vec![self.rows], y)
    }

    fn spectrum(&self) -> Result<OperatorSpectrum> {
        let svd = self.svd()?;
        let frob = self.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(OperatorSpectrum {
            spectral_norm: svd.spectral_norm(),
            frobenius_norm: frob,
            top_right_singular: Tensor::new(vec![self.cols], real_unit(&svd.right_vector(0)))?,
            per_frequency: Vec::new(),
        })
    }
}

/// A real unit vector in the span of `{Re v, Im v}`. For a real operator both
/// parts lie in the same singular subspace as `v`.
fn real_unit(v: &[Complex64]) -> Vec<f64> {
    let re: Vec<f64> = v.iter().map(|z| z.re).collect();
    let im: Vec<f64> = v.iter().map(|z| z.im).collect();
    let (nr, ni) = (re.iter().map(|a| a * a).sum::<f64>().sqrt(), im.iter().map(|a| a * a).sum::<f64>().sqrt());
    let (pick, norm) = if nr >= ni { (re, nr) } else { (im, ni) };
    pick.into_iter().map(|a| a / norm).collect()
}

/// Spectrum of a circular convolution from its per-frequency blocks.
fn block_spectrum(blocks: &[ComplexMatrix], n: usize) -> Result<OperatorSpectrum> {
    let svds: Vec<Svd> = blocks.par_iter().map(svd_small).collect::<Result<_>>()?;
    let frob = blocks.iter().map(|b| b.frobenius().powi(2)).sum::<f64>().sqrt();
    // The DFT is √N times a unitary map, so block norms already carry the right scale.
    let (best, sigma) = svds.iter().enumerate().map(|(f, s)| (f, s.spectral_norm())).fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let v = svds[best].right_vector(0);
    let top = frequency_vector(&v, best, n)?;
    Ok(OperatorSpectrum {
        spectral_norm: sigma,
        frobenius_norm: frob,
        top_right_singular: top,
        per_frequency: svds.into_iter().map(|s| s.values).collect(),
    })
}

/// Real `c×n×n` unit input whose spectrum is `v` at `f` and `conj(v)` at `−f`.
fn frequency_vector(v: &[Complex64], f: usize, n: usize) -> Result<Tensor> {
    let c = v.len();
    let nn = n * n;
    let (f1, f2) = (f / n, f % n);
    let mirror = ((n - f1) % n) * n + (n - f2) % n;
    let mut spec = CTensor::zeros(vec![c, n, n]);
    let data = spec.data_mut();
    if mirror == f {
        for (ch, z) in real_unit(v).into_iter().enumerate() {
            data[ch * nn + f] = Complex64::new(z, 0.0);
        }
    } else {
        for (ch, z) in v.iter().enumerate() {
            data[ch * nn + f] = *z;
            data[ch * nn + mirror] = z.conj();
        }
    }
    let x = idft2(&spec)?;
    let norm = x.norm_l2();
    Ok(x.scale(1.0 / norm))
}

/// Inserts `dilation − 1` zeros between kernel taps.
pub fn dilate_kernel(kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    if dilation <= 1 {
        return Ok(kernel.clone());
    }
    let (dh, dw) = ((kh - 1) * dilation + 1, (kw - 1) * dilation + 1);
    let mut out = vec![0.0; o * i * dh * dw];
    for a in 0..o * i {
        for u in 0..kh {
            for v in 0..kw {
                out[(a * dh + u * dilation) * dw + v * dilation] = kernel.data()[(a * kh + u) * kw + v];
            }
        }
    }
    Tensor::new(vec![o, i, dh, dw], out)
}

/// Spectrum of the circular convolution of `kernel` on an `n×n` grid.
pub fn conv_spectrum(kernel: &Tensor, n: usize, semantics: Semantics) -> Result<OperatorSpectrum> {
    let (o, i, _, _) = kernel_dims(kernel)?;
    if n == 0 {
        return Err(Error::Shape("grid size must be positive".into()));
    }
    match semantics {
        Semantics::Circular => block_spectrum(&kernel_dft(kernel, n)?, n),
        Semantics::Materialized => {
            let dim = o.max(i) * n * n;
            if dim > MATERIALIZE_CAP {
                return Err(Error::SizeCap { rows: o * n * n, cols: i * n * n, cap: MATERIALIZE_CAP });
            }
            let m = materialize(kernel, n)?;
            let svd = svd_small(&m)?;
            Ok(OperatorSpectrum {
                spectral_norm: svd.spectral_norm(),
                frobenius_norm: m.frobenius(),
                top_right_singular: Tensor::new(vec![i, n, n], real_unit(&svd.right_vector(0)))?,
                per_frequency: Vec::new(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplificationStatus {
    /// `σ₁ > 1`: the top singular direction is stretched.
    Amplifying,
    /// `σ₁ ≤ 1`: the precondition for amplification fails.
    NotAmplifying,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub status: AmplificationStatus,
    pub sigma1: f64,
    pub delta_norm: f64,
    pub response_norm: f64,
    /// Measured `‖Wδ‖ / ‖δ‖` for `δ` along `v₁`.
    pub ratio: f64,
}

/// Applies `op` to `δ = magnitude · v₁` and reports the measured stretch.
pub fn verify_amplification(op: &dyn LinearOperator, spectrum: &OperatorSpectrum, magnitude: f64) -> Result<AmplificationReport> {
    if !(magnitude > 0.0) {
        return Err(Error::Input(format!("perturbation magnitude must be positive, got {magnitude}")));
    }
    let delta = spectrum.top_right_singular.scale(magnitude);
    let response = op.apply(&delta)?;
    let (dn, rn) = (delta.norm_l2(), response.norm_l2());
    let status = if spectrum.spectral_norm > 1.0 + AMPLIFICATION_SLACK {
        AmplificationStatus::Amplifying
    } else {
        AmplificationStatus::NotAmplifying
    };
    Ok(AmplificationReport { status, sigma1: spectrum.spectral_norm, delta_norm: dn, response_norm: rn, ratio: rn / dn })
}

/// Random `m×n` matrix with singular values `sigma` (length `n`, `m ≥ n`).
pub fn matrix_with_spectrum(m: usize, sigma: &[f64], rng: &mut Rng) -> Result<MatrixOperator> {
    let n = sigma.len();
    if m < n || n == 0 {
        return Err(Error::Construction(format!("need rows ≥ {n} > 0, got {m}")));
    }
    let u = random_orthogonal(m, rng);
    let v = random_orthogonal(n, rng);
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[r * n + c] = (0..n).map(|k| u.get(r, k).re * sigma[k] * v.get(c, k).re).sum();
        }
    }
    MatrixOperator::new(m, n, data)
}

/// Singular values for an `m×n` operator with `σ₁ = sigma1` and
/// `‖W‖_F / ‖W‖₂ > m/n`. Trailing ratios are drawn uniformly; draws missing
/// the Frobenius bound are blended toward 1 until they clear it.
pub fn lemma1_spectrum(m: usize, n: usize, sigma1: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if m < n || n == 0 {
        return Err(Error::Construction(format!("need m ≥ n ≥ 1, got m={m}, n={n}")));
    }
    if !(sigma1 > 1.0) || !sigma1.is_finite() {
        return Err(Error::Construction(format!("spectral norm must exceed 1, got {sigma1}")));
    }
    let target = m as f64 / n as f64;
    // σᵢ ≤ σ₁ ⇒ ‖W‖_F ≤ √n ‖W‖₂.
    if target * target >= n as f64 {
        return Err(Error::Construction(format!(
            "no spectrum has ‖W‖_F/‖W‖₂ > {target} with {n} singular values (maximum √{n})"
        )));
    }
    let mut ratios: Vec<f64> = (1..n).map(|_| rng.random::<f64>()).collect();
    let need = target * target - 1.0;
    let energy = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    if energy(&ratios) <= need {
        // Bisect the blend r ← r + t(1 − r) to the smallest t clearing the bound, plus margin.
        let blend = |t: f64| ratios.iter().map(|r| r + t * (1.0 - r)).collect::<Vec<f64>>();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if energy(&blend(mid)) > need {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = hi + (1.0 - hi) * rng.random::<f64>() * 0.5;
        ratios = blend(t);
    }
    let mut sigma = vec![sigma1];
    sigma.extend(ratios.iter().map(|r| r * sigma1));
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// Outcome of one Lemma 1 trial under both readings of `v₁`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Trial {
    /// `‖WHδ‖ / ‖δ‖` with `δ` along the top right singular vector of `W`.
    pub ratio_w: f64,
    /// Same with `δ` along the top right singular vector of `WH`.
    pub ratio_wh: f64,
    pub threshold: f64,
}

impl Lemma1Trial {
    pub fn passes_w(&self) -> bool {
        self.ratio_w > self.threshold
    }

    pub fn passes_wh(&self) -> bool {
        self.ratio_wh > self.threshold
    }
}

/// Evaluates `‖WH(x̃ − x)‖ > (m/n)‖δ‖` for `‖δ‖ = epsilon`.
pub fn lemma1_trial(w: &MatrixOperator, h: &MatrixOperator, epsilon: f64) -> Result<Lemma1Trial> {
    let (m, n) = (w.rows(), w.cols());
    if h.rows() != n || h.cols() != n {
        return Err(Error::Shape(format!("H must be {n}x{n}, got {}x{}", h.rows(), h.cols())));
    }
    let wh = w.compose(h)?;
    let measure = |v: &Tensor| -> Result<f64> {
        let delta = v.scale(epsilon);
        Ok(wh.apply(&delta)?.norm_l2() / delta.norm_l2())
    };
    Ok(Lemma1Trial {
        ratio_w: measure(&w.spectrum()?.top_right_singular)?,
        ratio_wh: measure(&wh.spectrum()?.top_right_singular)?,
        threshold: m as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    pub pass_w: usize,
    pub pass_wh: usize,
    pub min_ratio_w: f64,
    pub min_ratio_wh: f64,
}

impl Lemma1Report {
    pub fn all_pass_either(&self) -> bool {
        self.pass_w == self.trials || self.pass_wh == self.trials
    }
}

/// Monte-Carlo check over random `W` meeting the hypotheses (`σ₁ ~ U(1, 2m/n)`)
/// and random orthogonal `H`.
pub fn verify_lemma1(trials: usize, m: usize, n: usize, seed: u64) -> Result<Lemma1Report> {
    let outcomes: Vec<Lemma1Trial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(derive_seed(seed, t as u64));
            let hi = 2.0 * m as f64 / n as f64;
            let sigma1 = 1.0 + (hi - 1.0) * (1.0 - rng.random::<f64>());
            let sigma = lemma1_spectrum(m, n, sigma1, &mut rng)?;
            let w = matrix_with_spectrum(m, &sigma, &mut rng)?;
            let h = matrix_with_spectrum(n, &vec![1.0; n], &mut rng)?;
            lemma1_trial(&w, &h, 1.0)
        })
        .collect::<Result<_>>()?;
    Ok(Lemma1Report {
        m,
        n,
        trials,
        pass_w: outcomes.iter().filter(|t| t.passes_w()).count(),
        pass_wh: outcomes.iter().filter(|t| t.passes_wh()).count(),
        min_ratio_w: outcomes.iter().map(|t| t.ratio_w).fold(f64::INFINITY, f64::min),
        min_ratio_wh: outcomes.iter().map(|t| t.ratio_wh).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementScore {
    pub layer_index: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Input spatial size `(H, W)`.
    pub s_in: (usize, usize),
    pub s_out: (usize, usize),
    /// `(c_out·H_out·W_out) / (c_in·H_in·W_in)`
    pub ratio: f64,
}

pub fn placement_ratio(c_in: usize, s_in: (usize, usize), c_out: usize, s_out: (usize, usize)) -> f64 {
    (c_out * s_out.0 * s_out.1) as f64 / (c_in * s_in.0 * s_in.1) as f64
}

/// One score per conv layer, from the static shape pass only.
pub fn placement_scan(model: &ModelGraph) -> Result<Vec<PlacementScore>> {
    let shapes = model.shapes()?;
    Ok(model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.is_conv())
        .map(|(i, _)| {
            let (a, b) = (&shapes[i], &shapes[i + 1]);
            PlacementScore {
                layer_index: i,
                c_in: a[0],
                c_out: b[0],
                s_in: (a[1], a[2]),
                s_out: (b[1], b[2]),
                ratio: placement_ratio(a[0], (a[1], a[2]), b[0], (b[1], b[2])),
            }
        })
        .collect())
}

/// Layer index with the smallest ratio; ties go to the deeper layer.
pub fn recommend(scores: &[PlacementScore]) -> Option<usize> {
    scores.iter().fold(None::<&PlacementScore>, |best, s| match best {
        Some(b) if b.ratio < s.ratio => Some(b),
        _ => Some(s),
    })
    .map(|s| s.layer_index)
}

/// Per-conv certification row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCertificate {
    pub placement: PlacementScore,
    pub sigma1: f64,
    pub frobenius: f64,
}

/// Placement scores plus `σ₁` and `‖W‖_F` of each conv, taken as the stride-1
/// circular operator on a `max(H, W)` grid with the dilated kernel.
pub fn certify(model: &ModelGraph) -> Result<Vec<LayerCertificate>> {
    model.validate()?;
    placement_scan(model)?
        .into_iter()
        .map(|p| {
            let layer = &model.layers[p.layer_index];
            let dilation = match layer.kind {
                LayerKind::Conv2d { dilation, .. } => dilation,
                _ => 1,
            };
            let kernel = dilate_kernel(&model.params[&layer.param_ids[0]], dilation)?;
            let spec = conv_spectrum(&kernel, p.s_in.0.max(p.s_in.1), Semantics::Circular)?;
            Ok(LayerCertificate { sigma1: spec.spectral_norm, frobenius: spec.frobenius_norm, placement: p })
        })
        .collect()
}

//! Score-inflation attacks: PGD, universal perturbation, and spatial flow warping.
//!
//! PGD and UAP work on the perturbation directly and project it onto the box
//! `[max(−ε, −x), min(ε, 1 − x)]`, so the attacked image `x + δ` is always a
//! valid image and `‖δ‖∞ ≤ ε` holds exactly. Iterate selection is by score over
//! iterates `1..=steps`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ScorePair;
use crate::nn::Prepared;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub const DEFAULT_FLOW_SMOOTHNESS: f64 = 0.05;
/// Smoothing inside the flow total variation, keeping it differentiable at 0.
pub const TV_SMOOTHING: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Uap,
    Stadv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ radius in `[0, 1]` pixel units (ignored by stAdv).
    pub epsilon: f64,
    pub steps: usize,
    /// Pixel step for PGD/UAP; largest per-iteration flow change for stAdv.
    pub step_size: f64,
    #[serde(default = "default_flow_smoothness")]
    pub flow_smoothness: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub random_start: bool,
}

fn default_flow_smoothness() -> f64 {
    DEFAULT_FLOW_SMOOTHNESS
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: 1.0 / 255.0,
            flow_smoothness: DEFAULT_FLOW_SMOOTHNESS,
            seed: 0,
            random_start: false,
        }
    }

    pub fn uap(epsilon: f64, steps: usize) -> Self {
        Self { kind: AttackKind::Uap, ..Self::pgd(epsilon, steps) }
    }

    pub fn stadv(steps: usize) -> Self {
        Self { kind: AttackKind::Stadv, epsilon: 0.0, step_size: 0.25, ..Self::pgd(0.0, steps) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.flow_smoothness >= 0.0) {
            return Err(Error::Config(format!("flow smoothness must be ≥ 0, got {}", self.flow_smoothness)));
        }
        Ok(())
    }

    fn expect(&self, kind: AttackKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind:?} config, got {:?}", self.kind)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: usize,
    pub clean_score: f64,
    pub attacked_score: f64,
    /// `‖x̃ − x‖∞`
    pub linf: f64,
    /// Mean and max per-pixel flow length (stAdv only).
    pub flow_mean: Option<f64>,
    pub flow_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub config: AttackConfig,
    pub outcomes: Vec<ImageOutcome>,
    /// Per-image `x̃ − x` (PGD), the single shared `v` (UAP), or per-image flows (stAdv).
    pub perturbations: Vec<Tensor>,
}

impl AttackResult {
    pub fn pairs(&self) -> Vec<ScorePair> {
        self.outcomes.iter().map(|o| ScorePair::new(o.image_id, o.clean_score, o.attacked_score)).collect()
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel feasible box for a perturbation shared by `images`.
fn feasible_box(images: &[&Tensor], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = images[0].len();
    let mut lo = vec![-eps; n];
    let mut hi = vec![eps; n];
    for x in images {
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(x.data()) {
            *l = l.max(-v);
            *h = h.min(1.0 - v);
        }
    }
    (lo, hi)
}

fn step_and_project(delta: &mut [f64], grad: &[f64], alpha: f64, lo: &[f64], hi: &[f64]) {
    for (((d, g), l), h) in delta.iter_mut().zip(grad).zip(lo).zip(hi) {
        *d = (*d + alpha * sign(*g)).max(*l).min(*h);
    }
}

fn check_image(x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Sign-gradient ascent shared by PGD (one image) and UAP (many).
fn sign_ascent(model: &Prepared<'_>, images: &[&Tensor], cfg: &AttackConfig, start: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    let shape = images[0].shape().to_vec();
    let (lo, hi) = feasible_box(images, cfg.epsilon);
    let mut delta = start;
    let n = images.len() as f64;
    let evaluate = |delta: &[f64], want_grad: bool| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let d = Tensor::new(shape.clone(), delta.to_vec())?;
        let per: Vec<(f64, Option<Tensor>)> = images
            .par_iter()
            .map(|x| {
                let xa = x.add(&d)?;
                if want_grad {
                    model.input_gradient(&xa).map(|(s, g)| (s, Some(g)))
                } else {
                    model.forward(&xa).map(|s| (s, None))
                }
            })
            .collect::<Result<_>>()?;
        let scores = per.iter().map(|p| p.0).collect();
        let grad = want_grad.then(|| {
            let mut it = per.into_iter().map(|p| p.1.expect("gradient requested"));
            let mut acc = it.next().expect("non-empty").into_data();
            for g in it {
                acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        });
        Ok((scores, grad))
    };
    let mean = |s: &[f64]| s.iter().sum::<f64>() / n;

    let clean: Vec<f64> = images.par_iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    let (_, mut grad) = evaluate(&delta, true)?;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for t in 1..=cfg.steps {
        step_and_project(&mut delta, grad.as_ref().expect("gradient"), cfg.step_size, &lo, &hi);
        let (scores, g) = evaluate(&delta, t < cfg.steps)?;
        grad = g;
        let m = mean(&scores);
        if best.as_ref().is_none_or(|b| m > b.0) {
            best = Some((m, scores, delta.clone()));
        }
    }
    let (_, scores, delta) = best.expect("steps ≥ 1");
    Ok((clean, scores, Tensor::new(shape, delta)?))
}

fn outcome(image_id: usize, clean: f64, attacked: f64, linf: f64) -> ImageOutcome {
    ImageOutcome { image_id, clean_score: clean, attacked_score: attacked, linf, flow_mean: None, flow_max: None }
}

fn pgd_single(model: &Prepared<'_>, x: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<(ImageOutcome, Tensor)> {
    check_image(x)?;
    let start = if cfg.random_start {
        let (lo, hi) = feasible_box(&[x], cfg.epsilon);
        let mut rng = seeded(seed);
        lo.iter().zip(&hi).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
    } else {
        vec![0.0; x.len()]
    };
    let (clean, scores, delta) = sign_ascent(model, &[x], cfg, start)?;
    Ok((outcome(0, clean[0], scores[0], delta.norm_linf()), delta))
}

/// ℓ∞ PGD on one image.
pub fn pgd_attack(model: &Prepared<'_>, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.expect(AttackKind::Pgd)?;
    let (o, d) = pgd_single(model, x, cfg, cfg.seed)?;
    Ok(AttackResult { config: *cfg, outcomes: vec![o], perturbations: vec![d] })
}

/// One shared perturbation for the whole dataset, trained on the mean gradient.
pub fn uap_train(model: &Prepared<'_>, images: &[Tensor], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.expect(AttackKind::Uap)?;
    if images.is_empty() {
        return Err(Error::Input("UAP needs at least one image".into()));
    }
    images.iter().try_for_each(check_image)?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let (clean, scores, v) = sign_ascent(model, &refs, cfg, vec![0.0; images[0].len()])?;
    let outcomes = clean
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (&c, &s))| outcome(i, c, s, v.norm_linf()))
        .collect();
    Ok(AttackResult { config: *cfg, outcomes, perturbations: vec![v] })
}

/// Bilinear sample of `x` at `(i + flow_y, j + flow_x)` with coordinates
/// clamped to the image. `flow` is `2×H×W` (row offsets, then column offsets).
pub fn warp(x: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    flow.expect_shape(&[2, h, w])?;
    let (xd, fd) = (x.data(), flow.data());
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            let s = Sample::new(i, j, fd[i * w + j], fd[h * w + i * w + j], h, w);
            for ch in 0..c {
                let p = &xd[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + i) * w + j] = s.value(p, w);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct Sample {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: f64,
    wx: f64,
    /// Whether each coordinate is strictly inside its clamp range.
    free_y: bool,
    free_x: bool,
}

impl Sample {
    fn new(i: usize, j: usize, fy: f64, fx: f64, h: usize, w: usize) -> Self {
        let (ry, rx) = (i as f64 + fy, j as f64 + fx);
        let (y, x) = (ry.clamp(0.0, (h - 1) as f64), rx.clamp(0.0, (w - 1) as f64));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        Self {
            y0,
            y1: (y0 + 1).min(h - 1),
            x0,
            x1: (x0 + 1).min(w - 1),
            wy: y - y0 as f64,
            wx: x - x0 as f64,
            free_y: ry > 0.0 && ry < (h - 1) as f64,
            free_x: rx > 0.0 && rx < (w - 1) as f64,
        }
    }

    /// Lerp form, so a constant plane is reproduced exactly.
    fn value(&self, p: &[f64], w: usize) -> f64 {
        let (a, b, c, d) = (p[self.y0 * w + self.x0], p[self.y0 * w + self.x1], p[self.y1 * w + self.x0], p[self.y1 * w + self.x1]);
        let top = a + self.wx * (b - a);
        let bot = c + self.wx * (d - c);
        top + self.wy * (bot - top)
    }

    /// `(∂/∂y, ∂/∂x)` of [`Self::value`].
    fn grad(&self, p: &[f64], w: usize) -> (f64, f64) {
        let (a, b, c, d) = (p[self.y0 * w + self.x0], p[self.y0 * w + self.x1], p[self.y1 * w + self.x0], p[self.y1 * w + self.x1]);
        let dy = if self.free_y { (c + self.wx * (d - c)) - (a + self.wx * (b - a)) } else { 0.0 };
        let dx = if self.free_x { (b - a) + self.wy * ((d - c) - (b - a)) } else { 0.0 };
        (dy, dx)
    }
}

/// Gradient of `⟨grad_out, warp(x, flow)⟩` with respect to `flow`.
pub fn warp_backward(x: &Tensor, flow: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    flow.expect_shape(&[2, h, w])?;
    grad_out.expect_shape(x.shape())?;
    let (xd, fd, gd) = (x.data(), flow.data(), grad_out.data());
    let mut out = vec![0.0; 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            let s = Sample::new(i, j, fd[i * w + j], fd[h * w + i * w + j], h, w);
            let (mut gy, mut gx) = (0.0, 0.0);
            for ch in 0..c {
                let (dy, dx) = s.grad(&xd[ch * h * w..(ch + 1) * h * w], w);
                let g = gd[(ch * h + i) * w + j];
                gy += g * dy;
                gx += g * dx;
            }
            out[i * w + j] = gy;
            out[h * w + i * w + j] = gx;
        }
    }
    Tensor::new(vec![2, h, w], out)
}

/// `Σ_p Σ_{q ∈ right/down(p)} sqrt(‖φ_p − φ_q‖² + η)` and its gradient.
pub fn flow_tv(flow: &Tensor) -> Result<(f64, Tensor)> {
    let (two, h, w) = flow.chw()?;
    if two != 2 {
        return Err(Error::Shape(format!("flow must be 2×H×W, got {:?}", flow.shape())));
    }
    let f = flow.data();
    let hw = h * w;
    let mut tv = 0.0;
    let mut g = vec![0.0; 2 * hw];
    let mut edge = |p: usize, q: usize, tv: &mut f64| {
        let (dy, dx) = (f[p] - f[q], f[hw + p] - f[hw + q]);
        let r = (dy * dy + dx * dx + TV_SMOOTHING).sqrt();
        *tv += r;
        g[p] += dy / r;
        g[q] -= dy / r;
        g[hw + p] += dx / r;
        g[hw + q] -= dx / r;
    };
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                edge(p, p + 1, &mut tv);
            }
            if i + 1 < h {
                edge(p, p + w, &mut tv);
            }
        }
    }
    Ok((tv, Tensor::new(vec![2, h, w], g)?))
}

fn stadv_single(model: &Prepared<'_>, x: &Tensor, cfg: &AttackConfig) -> Result<(ImageOutcome, Tensor)> {
    check_image(x)?;
    let (_, h, w) = x.chw()?;
    let mut flow = Tensor::zeros(vec![2, h, w]);
    let clean = model.forward(x)?;
    let mut best: Option<(f64, Tensor, Tensor)> = None;
    for _ in 0..cfg.steps {
        let warped = warp(x, &flow)?;
        let (_, gimg) = model.input_gradient(&warped)?;
        let mut grad = warp_backward(x, &flow, &gimg)?;
        let (_, gtv) = flow_tv(&flow)?;
        grad.axpy(-cfg.flow_smoothness, &gtv)?;
        let scale = grad.norm_linf();
        if scale > 0.0 {
            flow.axpy(cfg.step_size / scale, &grad)?;
        }
        let warped = warp(x, &flow)?;
        let score = model.forward(&warped)?;
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, flow.clone(), warped));
        }
    }
    let (score, flow, warped) = best.expect("steps ≥ 1");
    let hw = h * w;
    let lengths: Vec<f64> = (0..hw).map(|p| flow.data()[p].hypot(flow.data()[hw + p])).collect();
    let mut o = outcome(0, clean, score, warped.sub(x)?.norm_linf());
    o.flow_mean = Some(lengths.iter().sum::<f64>() / hw as f64);
    o.flow_max = Some(lengths.iter().cloned().fold(0.0, f64::max));
    Ok((o, flow))
}

/// Flow-field attack on one image: normalized gradient ascent on
/// `f(warp(x, φ)) − τ·TV(φ)`.
pub fn stadv_attack(model: &Prepared<'_>, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.expect(AttackKind::Stadv)?;
    let (o, flow) = stadv_single(model, x, cfg)?;
    Ok(AttackResult { config: *cfg, outcomes: vec![o], perturbations: vec![flow] })
}

/// Runs `cfg` over a dataset; per-image attacks run in parallel and keep order.
pub fn run_attack(model: &Prepared<'_>, images: &[Tensor], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("no images to attack".into()));
    }
    let per_image = |f: &(dyn Fn(usize, &Tensor) -> Result<(ImageOutcome, Tensor)> + Sync)| -> Result<AttackResult> {
        let results: Vec<(ImageOutcome, Tensor)> = images.par_iter().enumerate().map(|(i, x)| f(i, x)).collect::<Result<_>>()?;
        let (mut outcomes, perturbations): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        for (i, o) in outcomes.iter_mut().enumerate() {
            o.image_id = i;
        }
        Ok(AttackResult { config: *cfg, outcomes, perturbations })
    };
    match cfg.kind {
        AttackKind::Pgd => per_image(&|i, x| pgd_single(model, x, cfg, derive_seed(cfg.seed, i as u64))),
        AttackKind::Stadv => per_image(&|_, x| stadv_single(model, x, cfg)),
        AttackKind::Uap => uap_train(model, images, cfg),
    }
}

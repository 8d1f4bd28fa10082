//! Norm-preserving convolution through a per-frequency Cayley transform, and
//! the RobustBlock built around it.
//!
//! A real `c×c×k×k` kernel is transformed to per-frequency matrices `Ŵ(f)`.
//! Each is skew-Hermitianized (`A = Ŵ − Ŵ^H`) and mapped to the unitary
//! `Q(f) = (I − A)(I + A)^{-1}`. Applying `Q(f)` to every frequency of the
//! input spectrum is an orthogonal map on `ℝ^{c·n²}` under circular semantics.
//!
//! The RobustBlock chains adaptive square pooling, a bias-free 1×1 conv from
//! `C` to `⌊C/2⌋` channels, a zero-channel lift back to `C`, and the
//! orthogonal conv.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circulant::{kernel_dft, kernel_dft_adjoint, kernel_dims};
use crate::error::{Error, Result};
use crate::linalg::{cinv, orthonormalize, ComplexMatrix};
use crate::nn::ops::{adaptive_square_pool_backward, adaptive_square_pool_forward};
use crate::nn::{Layer, LayerKind, ModelGraph};
use crate::rng::{normal_vec, seeded, Rng};
use crate::tensor::{dft2, idft2, idft2_complex, CTensor, Tensor};

/// Spatial size of the Cayley kernel before embedding into the `n×n` grid.
pub const CAYLEY_KERNEL: usize = 3;

/// `Q = (I − A)(I + A)^{-1}` with `A = Ŵ − Ŵ^H`.
pub fn cayley_orthogonalize(w_hat: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(CayleyFactors::new(w_hat)?.q)
}

/// `Q` together with `B = (I + A)^{-1}`, which the backward pass needs.
#[derive(Clone, Debug)]
struct CayleyFactors {
    q: ComplexMatrix,
    b: ComplexMatrix,
}

impl CayleyFactors {
    fn new(w_hat: &ComplexMatrix) -> Result<Self> {
        if w_hat.rows() != w_hat.cols() {
            return Err(Error::Shape(format!("Cayley transform needs a square matrix, got {}x{}", w_hat.rows(), w_hat.cols())));
        }
        let n = w_hat.rows();
        let a = w_hat - &w_hat.adjoint();
        let eye = ComplexMatrix::identity(n);
        let b = cinv(&(&eye + &a))?;
        let q = &(&eye - &a) * &b;
        Ok(Self { q, b })
    }
}

/// Free parameters of an orthogonal conv: a real `c×c×k×k` kernel operating on
/// an `n×n` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CayleyConvParams {
    kernel: Tensor,
    size: usize,
}

impl CayleyConvParams {
    pub fn new(kernel: Tensor, size: usize) -> Result<Self> {
        let (o, i, _, _) = kernel_dims(&kernel)?;
        if o != i {
            return Err(Error::Shape(format!("Cayley kernel must be square in channels, got {o}x{i}")));
        }
        if size == 0 {
            return Err(Error::Config("operating size must be positive".into()));
        }
        Ok(Self { kernel, size })
    }

    /// Gaussian kernel with standard deviation `std`.
    pub fn random(channels: usize, size: usize, std: f64, rng: &mut Rng) -> Self {
        let k = CAYLEY_KERNEL;
        let data = normal_vec(rng, channels * channels * k * k, std);
        Self { kernel: Tensor::from_parts(vec![channels, channels, k, k], data), size }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Materializes the per-frequency unitary operators.
    pub fn operator(&self) -> Result<CayleyOperator> {
        CayleyOperator::new(&self.kernel, self.size)
    }
}

/// Per-frequency unitary blocks of an orthogonal conv, ready to apply.
#[derive(Clone, Debug)]
pub struct CayleyOperator {
    channels: usize,
    size: usize,
    kernel_dims: (usize, usize, usize, usize),
    factors: Vec<CayleyFactors>,
}

impl CayleyOperator {
    pub fn new(kernel: &Tensor, size: usize) -> Result<Self> {
        let dims = kernel_dims(kernel)?;
        let spectra = kernel_dft(kernel, size)?;
        let factors = spectra.par_iter().map(CayleyFactors::new).collect::<Result<Vec<_>>>()?;
        Ok(Self { channels: dims.0, size, kernel_dims: dims, factors })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `Q(f)` for frequency index `f1 * n + f2`.
    pub fn frequency_matrix(&self, f: usize) -> &ComplexMatrix {
        &self.factors[f].q
    }

    pub fn frequencies(&self) -> impl Iterator<Item = &ComplexMatrix> {
        self.factors.iter().map(|f| &f.q)
    }

    /// `max_f max_ij |(Q(f)^H Q(f) − I)_ij|`
    pub fn max_orthogonality_residual(&self) -> f64 {
        self.factors.iter().map(|f| f.q.orthogonality_residual()).fold(0.0, f64::max)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.chw()?;
        if h != w {
            return Err(Error::Shape(format!("orthogonal conv needs a square input, got {h}x{w}; pool first")));
        }
        if c != self.channels || h != self.size {
            return Err(Error::Shape(format!(
                "orthogonal conv expects {}×{}×{} input, got {:?}",
                self.channels,
                self.size,
                self.size,
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply_spectrum(&self, spectrum: &CTensor, adjoint: bool) -> CTensor {
        let (c, nn) = (self.channels, self.size * self.size);
        let mut out = CTensor::zeros(spectrum.shape().to_vec());
        let src = spectrum.data();
        let dst = out.data_mut();
        let mut v = vec![Complex64::new(0.0, 0.0); c];
        for (f, factor) in self.factors.iter().enumerate() {
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = src[ch * nn + f];
            }
            let y = if adjoint { factor.q.adjoint().mul_vec(&v) } else { factor.q.mul_vec(&v) };
            for (ch, z) in y.into_iter().enumerate() {
                dst[ch * nn + f] = z;
            }
        }
        out
    }

    /// Orthogonal conv forward: `Ŷ(f) = Q(f) X̂(f)`, output real.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        idft2(&self.apply_spectrum(&dft2(x)?, false))
    }

    /// Returns `(dL/dx, dL/dkernel)` given `dL/dy`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let (c, n) = (self.channels, self.size);
        let nn = n * n;
        let xf = dft2(x)?;
        // Cotangent of the spectrum: y = Re(F^H Ŷ)/N, so dL/dŶ = F·G / N.
        let mut gy = dft2(grad_out)?;
        let inv_n = 1.0 / nn as f64;
        gy.data_mut().iter_mut().for_each(|z| *z *= inv_n);

        let gx_spec = self.apply_spectrum(&gy, true);
        let mut gx = idft2_complex(&gx_spec)?;
        let gx = Tensor::from_parts(x.shape().to_vec(), gx.data_mut().iter().map(|z| z.re * nn as f64).collect());

        let eye = ComplexMatrix::identity(c);
        let grad_w: Vec<ComplexMatrix> = self
            .factors
            .par_iter()
            .enumerate()
            .map(|(f, factor)| {
                let mut grad_q = ComplexMatrix::zeros(c, c);
                for a in 0..c {
                    let g = gy.data()[a * nn + f];
                    for b in 0..c {
                        grad_q.set(a, b, g * xf.data()[b * nn + f].conj());
                    }
                }
                // dQ = −(I + Q) dA B  ⇒  dL/dA = −(I + Q)^H (dL/dQ) B^H
                let grad_a = (&(&(&eye + &factor.q).adjoint() * &grad_q) * &factor.b.adjoint()).scale(Complex64::new(-1.0, 0.0));
                &grad_a - &grad_a.adjoint()
            })
            .collect();
        let gk = kernel_dft_adjoint(&grad_w, self.kernel_dims, n);
        Ok((gx, gk))
    }
}

/// Convenience wrapper: build the operator and apply it once.
pub fn orth_conv_forward(params: &CayleyConvParams, x: &Tensor) -> Result<Tensor> {
    params.operator()?.apply(x)
}

/// Configuration of a RobustBlock insert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustBlockSpec {
    /// The block sits before this layer.
    pub insert_position: usize,
    pub channels: usize,
    pub mid_channels: usize,
    /// `min(H, W)` of the incoming activation.
    pub size: usize,
}

impl RobustBlockSpec {
    pub fn for_input(insert_position: usize, shape: &[usize]) -> Result<Self> {
        let [c, h, w] = shape[..] else {
            return Err(Error::Config(format!("RobustBlock needs a C×H×W input, got {shape:?}")));
        };
        if c < 2 {
            return Err(Error::Config(format!("RobustBlock needs at least 2 channels, got {c}")));
        }
        Ok(Self { insert_position, channels: c, mid_channels: c / 2, size: h.min(w) })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

/// Intermediates of one block evaluation.
#[derive(Clone, Debug)]
pub struct RobustBlockTrace {
    pub pooled: Tensor,
    pub lifted: Tensor,
    pub output: Tensor,
}

/// pool → 1×1 reduce (`reduce: mid×C`) → zero lift → orthogonal conv.
pub fn robust_block_forward(reduce: &Tensor, op: &CayleyOperator, x: &Tensor) -> Result<RobustBlockTrace> {
    let (c, _, _) = x.chw()?;
    let [mid, rc] = reduce.shape()[..] else {
        return Err(Error::Shape(format!("reduce weight must be mid×C, got {:?}", reduce.shape())));
    };
    if rc != c || op.channels() != c {
        return Err(Error::Shape(format!("RobustBlock built for {} channels, got {c}", op.channels())));
    }
    if c < 2 {
        return Err(Error::Config(format!("RobustBlock needs at least 2 channels, got {c}")));
    }
    let pooled = adaptive_square_pool_forward(x)?;
    let n = pooled.shape()[1];
    let nn = n * n;
    let mut lifted = vec![0.0; c * nn];
    let (pd, rd) = (pooled.data(), reduce.data());
    for m in 0..mid {
        let out = &mut lifted[m * nn..(m + 1) * nn];
        for ch in 0..c {
            let r = rd[m * c + ch];
            if r == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(&pd[ch * nn..(ch + 1) * nn]) {
                *o += r * p;
            }
        }
    }
    let lifted = Tensor::from_parts(vec![c, n, n], lifted);
    let output = op.apply(&lifted)?;
    Ok(RobustBlockTrace { pooled, lifted, output })
}

/// Returns `(dL/dx, dL/dreduce, dL/dkernel)`.
pub fn robust_block_backward(
    reduce: &Tensor,
    op: &CayleyOperator,
    x: &Tensor,
    trace: &RobustBlockTrace,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, _, _) = x.chw()?;
    let mid = reduce.shape()[0];
    let (g_lift, g_kernel) = op.backward(&trace.lifted, grad_out)?;
    let n = trace.pooled.shape()[1];
    let nn = n * n;
    let (gl, pd, rd) = (g_lift.data(), trace.pooled.data(), reduce.data());
    let mut g_reduce = vec![0.0; mid * c];
    let mut g_pooled = vec![0.0; c * nn];
    for m in 0..mid {
        let gm = &gl[m * nn..(m + 1) * nn];
        for ch in 0..c {
            let p = &pd[ch * nn..(ch + 1) * nn];
            g_reduce[m * c + ch] = gm.iter().zip(p).map(|(a, b)| a * b).sum();
            let r = rd[m * c + ch];
            for (o, g) in g_pooled[ch * nn..(ch + 1) * nn].iter_mut().zip(gm) {
                *o += r * g;
            }
        }
    }
    let g_pooled = Tensor::from_parts(vec![c, n, n], g_pooled);
    let gx = adaptive_square_pool_backward(x.shape(), &g_pooled)?;
    Ok((gx, Tensor::from_parts(vec![mid, c], g_reduce), g_kernel))
}

/// Random reduce weight with orthonormal rows (so `σ₁ = 1` at init).
pub fn init_reduce_weight(mid: usize, channels: usize, rng: &mut Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..mid).map(|_| normal_vec(rng, channels, 1.0)).collect();
    orthonormalize(&mut rows);
    Tensor::from_parts(vec![mid, channels], rows.concat())
}

/// Standard deviation of freshly initialized Cayley kernel taps.
pub const CAYLEY_INIT_STD: f64 = 0.1;

/// Inserts a RobustBlock before conv layer `position`.
///
/// Existing parameters are carried over untouched; the block gets a
/// random reduce weight with orthonormal rows and a random Cayley kernel.
pub fn insert_robust_block(model: &ModelGraph, position: usize, seed: u64) -> Result<ModelGraph> {
    let layer = model
        .layers
        .get(position)
        .ok_or_else(|| Error::Config(format!("insert position {position} is past the last layer")))?;
    if !matches!(layer.kind, LayerKind::Conv2d { .. }) {
        return Err(Error::Config(format!("insert position {position} ({}) is not a conv layer", layer.name)));
    }
    let shapes = model.shapes()?;
    let spec = RobustBlockSpec::for_input(position, &shapes[position])?;

    let mut rng = seeded(seed);
    let idx = (0..).find(|i| !model.params.contains_key(&format!("robust{i}.reduce"))).expect("unbounded search");
    let name = format!("robust{idx}");
    let reduce_id = format!("{name}.reduce");
    let kernel_id = format!("{name}.cayley");
    let reduce = init_reduce_weight(spec.mid_channels, spec.channels, &mut rng);
    let kernel = CayleyConvParams::random(spec.channels, spec.size, CAYLEY_INIT_STD, &mut rng);

    let mut out = model.clone();
    out.params.insert(reduce_id.clone(), reduce);
    out.params.insert(kernel_id.clone(), kernel.kernel);
    out.layers.insert(
        position,
        Layer {
            name,
            kind: LayerKind::RobustBlock {
                channels: spec.channels,
                mid_channels: spec.mid_channels,
                size: spec.size,
                kernel: CAYLEY_KERNEL,
            },
            param_ids: vec![reduce_id, kernel_id],
            fresh: true,
            masked_channels: Vec::new(),
        },
    );
    out.validate()?;
    Ok(out)
}

//! Dense real and complex tensors plus the 2-D DFT pair.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the full `1/(H*W)` factor. Checkpoints record this as [`DFT_CONVENTION`].

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label written into checkpoint headers.
pub const DFT_CONVENTION: &str = "forward-unnormalized/inverse-1/N";

/// Imaginary residue below which an inverse transform is accepted as real.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Row-major real64 tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite scalars.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// Internal constructor for data produced by arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data viewed under another shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected C×H×W tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape())?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("expected shape {:?}, got {:?}", shape, self.shape)));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!("shape {shape:?} needs {n} scalars, got {len}")));
    }
    Ok(())
}

/// Row-major complex128 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    fn from_real(x: &Tensor) -> Self {
        Self { shape: x.shape.clone(), data: x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }
}

/// Unnormalized forward 2-D DFT of every channel of a `C×H×W` tensor.
pub fn dft2(x: &Tensor) -> Result<CTensor> {
    x.chw()?;
    let mut out = CTensor::from_real(x);
    transform_2d(&mut out, false);
    Ok(out)
}

/// Inverse 2-D DFT (with the `1/(H*W)` factor) returning a real tensor.
///
/// Fails if the largest imaginary residue reaches [`SYMMETRY_TOLERANCE`].
pub fn idft2(x: &CTensor) -> Result<Tensor> {
    let spatial = idft2_complex(x)?;
    let residue = spatial.data.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if residue >= SYMMETRY_TOLERANCE {
        return Err(Error::SymmetryViolation { residue });
    }
    Ok(Tensor::from_parts(spatial.shape, spatial.data.into_iter().map(|z| z.re).collect()))
}

/// Complex forward transform (unnormalized).
pub fn dft2_complex(x: &CTensor) -> Result<CTensor> {
    expect_rank3(x.shape())?;
    let mut out = x.clone();
    transform_2d(&mut out, false);
    Ok(out)
}

/// Complex inverse transform including the `1/(H*W)` factor.
pub fn idft2_complex(x: &CTensor) -> Result<CTensor> {
    expect_rank3(x.shape())?;
    let mut out = x.clone();
    transform_2d(&mut out, true);
    let scale = 1.0 / (x.shape[1] * x.shape[2]) as f64;
    for z in &mut out.data {
        *z *= scale;
    }
    Ok(out)
}

fn expect_rank3(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected C×H×W tensor, got shape {shape:?}")));
    }
    Ok(())
}

/// `exp(∓2πi k/n)` for `k in 0..n`.
pub(crate) fn twiddles(n: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

// Direct O(n²) per-axis transform; spatial sizes here stay below ~64.
fn transform_2d(x: &mut CTensor, inverse: bool) {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let tw_w = twiddles(w, inverse);
    let tw_h = twiddles(h, inverse);
    let mut line = vec![Complex64::new(0.0, 0.0); h.max(w)];
    for ch in 0..c {
        let plane = &mut x.data[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            let row = &mut plane[r * w..(r + 1) * w];
            for (k, out) in line[..w].iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, v) in row.iter().enumerate() {
                    acc += v * tw_w[(k * j) % w];
                }
                *out = acc;
            }
            row.copy_from_slice(&line[..w]);
        }
        for col in 0..w {
            for (k, out) in line[..h].iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..h {
                    acc += plane[i * w + col] * tw_h[(k * i) % h];
                }
                *out = acc;
            }
            for i in 0..h {
                plane[i * w + col] = line[i];
            }
        }
    }
}

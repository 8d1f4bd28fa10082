//! Small dense complex linear algebra: inversion and one-sided Jacobi SVD.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, Rng};

/// Largest dimension `svd_small` accepts.
pub const SVD_SIZE_CAP: usize = 4096;
/// Jacobi sweep limit.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const SVD_OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Inversion refuses matrices whose 1-norm condition estimate reaches this.
pub const CONDITION_LIMIT: f64 = 1e12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        if let Some(index) = data.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = Complex64::new(d, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j).conj();
            }
        }
        out
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * k).collect() }
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.cols, "matrix-vector dimension mismatch");
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).norm()))
    }

    /// `max |(self^H self - I)_ij|`
    pub fn orthogonality_residual(&self) -> f64 {
        (&self.adjoint() * self).max_abs_diff(&Self::identity(self.cols))
    }

    fn norm_1(&self) -> f64 {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j).norm()).sum::<f64>()).fold(0.0, f64::max)
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, rhs.rows, "matrix product dimension mismatch");
        let mut out = ComplexMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out.data[i * rhs.cols..(i + 1) * rhs.cols].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        ComplexMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        ComplexMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn cinv(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    if m.rows != m.cols {
        return Err(Error::Shape(format!("cannot invert a {}x{} matrix", m.rows, m.cols)));
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut inv = ComplexMatrix::identity(n);
    let scale = m.data.iter().fold(0.0f64, |s, z| s.max(z.norm()));
    if scale == 0.0 {
        return Err(Error::Inversion { condition: f64::INFINITY });
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a.get(r, col).norm().total_cmp(&a.get(s, col).norm()))
            .expect("non-empty pivot range");
        let pivot = a.get(pivot_row, col);
        if pivot.norm() <= scale * f64::EPSILON * 1e-4 {
            return Err(Error::Inversion { condition: f64::INFINITY });
        }
        if pivot_row != col {
            for j in 0..n {
                a.data.swap(col * n + j, pivot_row * n + j);
                inv.data.swap(col * n + j, pivot_row * n + j);
            }
        }
        let p_inv = pivot.inv();
        for j in 0..n {
            a.data[col * n + j] *= p_inv;
            inv.data[col * n + j] *= p_inv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a.get(r, col);
            if factor == ZERO {
                continue;
            }
            for j in 0..n {
                let (av, iv) = (a.data[col * n + j], inv.data[col * n + j]);
                a.data[r * n + j] -= factor * av;
                inv.data[r * n + j] -= factor * iv;
            }
        }
    }
    let condition = m.norm_1() * inv.norm_1();
    if !condition.is_finite() || condition >= CONDITION_LIMIT {
        return Err(Error::Inversion { condition });
    }
    Ok(inv)
}

/// Singular value decomposition `M = U Σ V^H` (thin in `U`).
#[derive(Clone, Debug)]
pub struct Svd {
    /// Descending, length `cols`.
    pub values: Vec<f64>,
    /// `cols × cols` unitary; column `k` is the right singular vector for `values[k]`.
    pub v: ComplexMatrix,
    /// `rows × cols`; column `k` is `M v_k / σ_k`, or zero when `σ_k` vanishes.
    pub u: ComplexMatrix,
}

impl Svd {
    pub fn spectral_norm(&self) -> f64 {
        self.values[0]
    }

    pub fn right_vector(&self, k: usize) -> Vec<Complex64> {
        self.v.column(k)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd_small(m: &ComplexMatrix) -> Result<Svd> {
    let (rows, cols) = (m.rows, m.cols);
    if rows > SVD_SIZE_CAP || cols > SVD_SIZE_CAP {
        return Err(Error::SizeCap { rows, cols, cap: SVD_SIZE_CAP });
    }
    // Column-major working copies so each rotation touches contiguous memory.
    let mut a: Vec<Vec<Complex64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<Complex64>> = (0..cols)
        .map(|j| {
            let mut e = vec![ZERO; cols];
            e[j] = ONE;
            e
        })
        .collect();
    let mut norms: Vec<f64> = a.iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect();

    // Columns this small are numerically zero; rotating them only chases noise.
    let negligible = norms.iter().sum::<f64>() * 1e-30;
    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma: Complex64 = a[p].iter().zip(&a[q]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g == 0.0 || g <= SVD_OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = (gamma / g).conj();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, phase, c, s);
                rotate(&mut v, p, q, phase, c, s);
                norms[p] = a[p].iter().map(|z| z.norm_sqr()).sum();
                norms[q] = a[q].iter().map(|z| z.norm_sqr()).sum();
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { sweeps: SVD_MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let sigma: Vec<f64> = norms.iter().map(|n| n.sqrt()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let floor = sigma.iter().fold(0.0f64, |m, &s| m.max(s)) * f64::EPSILON * (rows.max(cols) as f64);
    let mut values = Vec::with_capacity(cols);
    let mut vm = ComplexMatrix::zeros(cols, cols);
    let mut um = ComplexMatrix::zeros(rows, cols);
    for (k, &j) in order.iter().enumerate() {
        values.push(sigma[j]);
        for i in 0..cols {
            vm.set(i, k, v[j][i]);
        }
        if sigma[j] > floor {
            for i in 0..rows {
                um.set(i, k, a[j][i] / sigma[j]);
            }
        }
    }
    Ok(Svd { values, v: vm, u: um })
}

fn rotate(cols: &mut [Vec<Complex64>], p: usize, q: usize, phase: Complex64, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yp = *y * phase;
        let xv = *x;
        *x = xv * c - yp * s;
        *y = xv * s + yp * c;
    }
}

/// Real `n×n` orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> ComplexMatrix {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
    orthonormalize(&mut cols);
    let mut m = ComplexMatrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m.set(i, j, Complex64::new(v, 0.0));
        }
    }
    m
}

/// Modified Gram-Schmidt applied twice for full working precision.
pub(crate) fn orthonormalize(cols: &mut [Vec<f64>]) {
    for j in 0..cols.len() {
        for _ in 0..2 {
            for k in 0..j {
                let d: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (a, b) in tail[0].iter_mut().zip(&head[k]) {
                    *a -= d * b;
                }
            }
        }
        let n: f64 = cols[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut cols[j] {
            *a /= n;
        }
    }
}

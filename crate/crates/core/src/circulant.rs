//! Circular (wrap-around) convolution on an `n×n` grid.
//!
//! A kernel `w[o, i, u, v]` of spatial size `k×k` is embedded with centered
//! offsets `u - k/2`, so
//! `y[o, p] = Σ_{i,u,v} w[o,i,u,v] · x[i, p - off(u,v) mod n]`.
//! Under the unnormalized DFT this is block-diagonal: `Ŷ(f) = Ŵ(f) X̂(f)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::tensor::{twiddles, Tensor};

/// `(out_channels, in_channels, kh, kw)` of a rank-4 kernel.
pub fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape()[..] {
        [o, i, kh, kw] => Ok((o, i, kh, kw)),
        _ => Err(Error::Shape(format!("expected O×I×k×k kernel, got {:?}", kernel.shape()))),
    }
}

#[inline]
fn offset(u: usize, k: usize) -> isize {
    u as isize - (k / 2) as isize
}

#[inline]
fn wrap(v: isize, n: usize) -> usize {
    v.rem_euclid(n as isize) as usize
}

/// Per-frequency `O×I` transfer matrices `Ŵ(f)`, indexed by `f1 * n + f2`.
pub fn kernel_dft(kernel: &Tensor, n: usize) -> Result<Vec<ComplexMatrix>> {
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    let tw = twiddles(n, false);
    let w = kernel.data();
    let mut out = vec![ComplexMatrix::zeros(o, i); n * n];
    for f1 in 0..n {
        for f2 in 0..n {
            let m = &mut out[f1 * n + f2];
            for a in 0..o {
                for b in 0..i {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for u in 0..kh {
                        let pu = wrap(offset(u, kh), n) * f1 % n;
                        for v in 0..kw {
                            let pv = wrap(offset(v, kw), n) * f2 % n;
                            acc += w[((a * i + b) * kh + u) * kw + v] * tw[(pu + pv) % n];
                        }
                    }
                    m.set(a, b, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`kernel_dft`] on the real kernel: maps per-frequency
/// cotangents `G(f)` to `Re Σ_f G(f) e^{+2πi f·off/n}` for every tap.
pub fn kernel_dft_adjoint(grads: &[ComplexMatrix], dims: (usize, usize, usize, usize), n: usize) -> Tensor {
    let (o, i, kh, kw) = dims;
    let tw = twiddles(n, true);
    let mut out = vec![0.0; o * i * kh * kw];
    for a in 0..o {
        for b in 0..i {
            for u in 0..kh {
                let ou = wrap(offset(u, kh), n);
                for v in 0..kw {
                    let ov = wrap(offset(v, kw), n);
                    let mut acc = 0.0;
                    for f1 in 0..n {
                        for f2 in 0..n {
                            let g = grads[f1 * n + f2].get(a, b);
                            acc += (g * tw[(ou * f1 + ov * f2) % n]).re;
                        }
                    }
                    out[((a * i + b) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![o, i, kh, kw], out)
}

/// Direct spatial evaluation of the circular convolution.
pub fn circular_conv(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    let (c, h, w) = x.chw()?;
    if c != i || h != w {
        return Err(Error::Shape(format!("kernel expects {i}×n×n input, got {:?}", x.shape())));
    }
    let n = h;
    let (kd, xd) = (kernel.data(), x.data());
    let mut y = vec![0.0; o * n * n];
    for a in 0..o {
        for b in 0..i {
            for u in 0..kh {
                for v in 0..kw {
                    let wv = kd[((a * i + b) * kh + u) * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let (du, dv) = (offset(u, kh), offset(v, kw));
                    for p1 in 0..n {
                        let s1 = wrap(p1 as isize - du, n);
                        for p2 in 0..n {
                            let s2 = wrap(p2 as isize - dv, n);
                            y[(a * n + p1) * n + p2] += wv * xd[(b * n + s1) * n + s2];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![o, n, n], y))
}

/// Explicit `(O·n²) × (I·n²)` matrix of the circular convolution.
pub fn materialize(kernel: &Tensor, n: usize) -> Result<ComplexMatrix> {
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    let (rows, cols) = (o * n * n, i * n * n);
    let mut m = vec![0.0; rows * cols];
    let kd = kernel.data();
    for a in 0..o {
        for b in 0..i {
            for u in 0..kh {
                for v in 0..kw {
                    let wv = kd[((a * i + b) * kh + u) * kw + v];
                    let (du, dv) = (offset(u, kh), offset(v, kw));
                    for p1 in 0..n {
                        let s1 = wrap(p1 as isize - du, n);
                        for p2 in 0..n {
                            let s2 = wrap(p2 as isize - dv, n);
                            let (r, col) = ((a * n + p1) * n + p2, (b * n + s1) * n + s2);
                            m[r * cols + col] += wv;
                        }
                    }
                }
            }
        }
    }
    ComplexMatrix::from_real(rows, cols, &m)
}

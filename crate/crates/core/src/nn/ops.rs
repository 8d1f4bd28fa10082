//! Forward and backward kernels for the individual layer types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis:
/// `floor((s_in + 2·pad − (ker−1)·dilation − 1) / stride + 1)`.
pub fn conv_out_size(s_in: usize, ker: usize, pad: usize, stride: usize, dilation: usize) -> Result<usize> {
    if s_in == 0 || ker == 0 || stride == 0 || dilation == 0 {
        return Err(Error::Config(format!(
            "conv sizes must be positive (s_in={s_in}, ker={ker}, stride={stride}, dilation={dilation})"
        )));
    }
    let numer = (s_in + 2 * pad) as isize - ((ker - 1) * dilation) as isize - 1;
    if numer < 0 {
        return Err(Error::Config(format!(
            "conv with ker={ker}, pad={pad}, stride={stride}, dilation={dilation} has no output for input size {s_in}"
        )));
    }
    Ok(numer as usize / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Zero-padded cross-correlation, `x: C×H×W`, `w: O×C×k×k`, `b: O`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (c, h, wd) = x.chw()?;
    let (o, wc, kh, kw) = dims4(w)?;
    if wc != c {
        return Err(Error::Shape(format!("conv expects {wc} input channels, got {c}")));
    }
    let ho = conv_out_size(h, kh, g.padding, g.stride, g.dilation)?;
    let wo = conv_out_size(wd, kw, g.padding, g.stride, g.dilation)?;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; o * ho * wo];
    for oc in 0..o {
        let plane = &mut y[oc * ho * wo..(oc + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[oc]);
        for ic in 0..c {
            for u in 0..kh {
                for v in 0..kw {
                    let wv = wdat[((oc * c + ic) * kh + u) * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * g.stride + u * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xd[(ic * h + iy as usize) * wd..(ic * h + iy as usize + 1) * wd];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + v * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < wd as isize {
                                plane[oy * wo + ox] += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![o, ho, wo], y))
}

/// Returns `(dL/dx, dL/dw, dL/db)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: ConvGeometry, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, wd) = x.chw()?;
    let (o, _, kh, kw) = dims4(w)?;
    let (go, ho, wo) = grad_out.chw()?;
    debug_assert_eq!(go, o);
    let (xd, wdat, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![0.0; c * h * wd];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    for oc in 0..o {
        let gplane = &gd[oc * ho * wo..(oc + 1) * ho * wo];
        gb[oc] = gplane.iter().sum();
        for ic in 0..c {
            for u in 0..kh {
                for v in 0..kw {
                    let widx = ((oc * c + ic) * kh + u) * kw + v;
                    let wv = wdat[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + u * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ic * h + iy as usize) * wd;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + v * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < wd as isize {
                                let gv = gplane[oy * wo + ox];
                                acc += gv * xd[base + ix as usize];
                                gx[base + ix as usize] += gv * wv;
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, h, wd], gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![o], gb),
    ))
}

fn dims4(w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match w.shape()[..] {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Shape(format!("expected rank-4 weight, got {:?}", w.shape()))),
    }
}

/// `y = W x + b` on a flat input.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (o, n) = dims2(w)?;
    if x.len() != n || x.rank() != 1 {
        return Err(Error::Shape(format!("dense expects a flat input of length {n}, got {:?}", x.shape())));
    }
    let y = (0..o)
        .map(|r| b.data()[r] + w.data()[r * n..(r + 1) * n].iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    Ok(Tensor::from_parts(vec![o], y))
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (o, n) = dims2(w)?;
    let g = grad_out.data();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; o * n];
    for r in 0..o {
        let row = &w.data()[r * n..(r + 1) * n];
        for j in 0..n {
            gx[j] += g[r] * row[j];
            gw[r * n + j] = g[r] * x.data()[j];
        }
    }
    Ok((Tensor::from_parts(vec![n], gx), Tensor::from_parts(vec![o, n], gw), Tensor::from_parts(vec![o], g.to_vec())))
}

fn dims2(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape()[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Shape(format!("expected rank-2 weight, got {:?}", w.shape()))),
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Silu,
    /// tanh approximation
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        self != Activation::Relu
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(act: Activation, x: &Tensor) -> Tensor {
    x.map(|v| act.apply(v))
}

pub fn activation_backward(act: Activation, x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(grad_out.data()).map(|(&v, &g)| g * act.derivative(v)).collect(),
    )
}

/// `[floor(i·len/out), ceil((i+1)·len/out))`
pub fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive average pooling of `C×H×W` to `C×n×n` with `n = min(H, W)`.
pub fn adaptive_square_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let n = h.min(w);
    if h == w {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut y = vec![0.0; c * n * n];
    for ch in 0..c {
        for i in 0..n {
            let (r0, r1) = adaptive_window(i, h, n);
            for j in 0..n {
                let (c0, c1) = adaptive_window(j, w, n);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc += xd[(ch * h + r) * w + col];
                    }
                }
                y[(ch * n + i) * n + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, n, n], y))
}

pub fn adaptive_square_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if h == w {
        return Ok(grad_out.clone());
    }
    let n = h.min(w);
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..n {
            let (r0, r1) = adaptive_window(i, h, n);
            for j in 0..n {
                let (c0, c1) = adaptive_window(j, w, n);
                let share = g[(ch * n + i) * n + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        gx[(ch * h + r) * w + col] += share;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

/// Non-overlapping `k×k` average pooling (trailing rows/columns dropped).
pub fn avg_pool_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (h / k, w / k);
    if k == 0 || ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("avg_pool({k}) cannot pool {:?}", x.shape())));
    }
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for r in 0..k {
                    for s in 0..k {
                        acc += xd[(ch * h + i * k + r) * w + j * k + s];
                    }
                }
                y[(ch * ho + i) * wo + j] = acc * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], y))
}

pub fn avg_pool_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let share = g[(ch * ho + i) * wo + j] * inv;
                for r in 0..k {
                    for s in 0..k {
                        gx[(ch * h + i * k + r) * w + j * k + s] = share;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// `C×H×W → C` channel means.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let y = (0..c).map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![c], y))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, hw) = (input_shape[0], input_shape[1] * input_shape[2]);
    let mut gx = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let share = grad_out.data()[ch] / hw as f64;
        gx.extend(std::iter::repeat_n(share, hw));
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

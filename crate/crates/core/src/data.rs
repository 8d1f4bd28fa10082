//! Synthetic quality-labelled images, PPM/PGM IO, checkpoints, and raw tensors.
//!
//! All binary formats are little-endian.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Layer, ModelGraph, ScoreRange};
use crate::rng::{derive_seed, normal, seeded, Rng};
use crate::tensor::{Tensor, DFT_CONVENTION};

pub const MAX_IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    AdditiveNoise,
    ContrastCrush,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [DistortionKind::GaussianBlur, DistortionKind::AdditiveNoise, DistortionKind::ContrastCrush];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub kind: DistortionKind,
    /// In `[0, 1]`.
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySample {
    pub image: Tensor,
    /// `1 − severity`.
    pub label: f64,
    pub distortion: Distortion,
}

/// Procedural `3×size×size` image: a tilted gradient, two sinusoids, and a few flat patches.
pub fn base_image(size: usize, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; IMAGE_CHANNELS * size * size];
    let s = size as f64;
    for ch in 0..IMAGE_CHANNELS {
        let plane = &mut data[ch * size * size..(ch + 1) * size * size];
        let angle = rng.random::<f64>() * 2.0 * PI;
        let (ga, gb) = (angle.cos(), angle.sin());
        let offset = 0.3 + 0.4 * rng.random::<f64>();
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random::<f64>() * 2.0 * PI, 0.05 + 0.1 * rng.random::<f64>()))
            .collect();
        for i in 0..size {
            for j in 0..size {
                let (u, v) = (i as f64 / s, j as f64 / s);
                let mut val = offset + 0.25 * (ga * (u - 0.5) + gb * (v - 0.5));
                for &(fu, fv, ph, amp) in &waves {
                    val += amp * (2.0 * PI * (fu * u + fv * v) + ph).sin();
                }
                plane[i * size + j] = val;
            }
        }
    }
    for _ in 0..rng.random_range(1..4) {
        let (h, w) = (rng.random_range(size / 8 + 1..=size / 2 + 1), rng.random_range(size / 8 + 1..=size / 2 + 1));
        let (i0, j0) = (rng.random_range(0..=size - h.min(size)), rng.random_range(0..=size - w.min(size)));
        let shade: Vec<f64> = (0..IMAGE_CHANNELS).map(|_| rng.random::<f64>()).collect();
        for (ch, &c) in shade.iter().enumerate() {
            for i in i0..(i0 + h).min(size) {
                for j in j0..(j0 + w).min(size) {
                    let p = &mut data[(ch * size + i) * size + j];
                    *p = 0.5 * *p + 0.5 * c;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![IMAGE_CHANNELS, size, size], data).expect("finite by construction")
}

/// Separable Gaussian blur with edge replication; `sigma = 0` is the identity.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let d = k as isize - radius;
                        let (ii, jj) = if horizontal {
                            (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                        };
                        acc += t * src[(ch * h + ii) * w + jj];
                    }
                    out[(ch * h + i) * w + j] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(x.data(), true);
    Tensor::new(x.shape().to_vec(), pass(&tmp, false))
}

/// Applies `d` to `x`; severity 0 returns `x` unchanged.
pub fn distort(x: &Tensor, d: Distortion, rng: &mut Rng) -> Result<Tensor> {
    if d.severity == 0.0 {
        return Ok(x.clone());
    }
    let s = d.severity;
    match d.kind {
        DistortionKind::GaussianBlur => gaussian_blur(x, 2.0 * s),
        DistortionKind::AdditiveNoise => {
            let std = 0.25 * s;
            let data = x.data().iter().map(|v| (v + std * normal(rng)).clamp(0.0, 1.0)).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        DistortionKind::ContrastCrush => {
            let (c, h, w) = x.chw()?;
            let keep = 1.0 - 0.9 * s;
            let mut out = x.data().to_vec();
            for plane in out.chunks_mut(h * w).take(c) {
                let mean = plane.iter().sum::<f64>() / (h * w) as f64;
                plane.iter_mut().for_each(|v| *v = mean + keep * (*v - mean));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
    }
}

/// `n` labelled samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, image_size: usize, seed: u64) -> Result<Vec<QualitySample>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be ≥ 1".into()));
    }
    if !(4..=MAX_IMAGE_SIZE).contains(&image_size) {
        return Err(Error::Input(format!("image size must be in [4, {MAX_IMAGE_SIZE}], got {image_size}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            let base = base_image(image_size, &mut rng);
            let kind = DistortionKind::ALL[rng.random_range(0..DistortionKind::ALL.len())];
            let severity = rng.random::<f64>();
            let distortion = Distortion { kind, severity };
            let image = distort(&base, distortion, &mut rng)?;
            Ok(QualitySample { image, label: 1.0 - severity, distortion })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/10/20 partition of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// PGM (1 channel) or PPM (3 channels) with maxval 255; values are rounded from `[0, 1]`.
pub fn encode_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = x.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Input(format!("PPM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = x.data();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out.push((d[(ch * h + i) * w + j].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() {
            if bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            } else if bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
    };
    let token = |pos: &mut usize| -> Result<(usize, usize)> {
        skip_ws(pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format_err(start, "expected a decimal number"));
        }
        let v = std::str::from_utf8(&bytes[start..*pos])
            .expect("ascii digits")
            .parse::<usize>()
            .map_err(|_| format_err(start, "number out of range"))?;
        Ok((v, start))
    };
    if bytes.len() < 2 {
        return Err(format_err(0, "file too short for a magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(format_err(0, "expected magic P5 or P6")),
    };
    pos += 2;
    let (w, wo) = token(&mut pos)?;
    let (h, ho) = token(&mut pos)?;
    let (maxval, mo) = token(&mut pos)?;
    if w == 0 {
        return Err(format_err(wo, "width must be positive"));
    }
    if h == 0 {
        return Err(format_err(ho, "height must be positive"));
    }
    if maxval != 255 {
        return Err(format_err(mo, format!("unsupported maxval {maxval} (only 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(pos, "expected a single whitespace byte before the pixel data"));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(format_err(bytes.len(), format!("payload truncated: {} of {need} bytes", bytes.len() - pos)));
    }
    let px = &bytes[pos..pos + need];
    let mut data = vec![0.0; need];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..channels {
                data[(ch * h + i) * w + j] = px[(i * w + j) * channels + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn save_ppm(path: &Path, x: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(x)?)?)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub const TENSOR_MAGIC: &[u8; 5] = b"QTEN1";

/// `QTEN1`, `u32` rank, `u64` dims, `f64` payload.
pub fn encode_tensor(x: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * (x.rank() + x.len()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(x.rank() as u32).to_le_bytes());
    for &d in x.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u64(bytes: &[u8], pos: usize) -> Result<u64> {
    bytes
        .get(pos..pos + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| format_err(bytes.len(), "truncated"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 9 || &bytes[..5] != TENSOR_MAGIC {
        return Err(format_err(0, "expected magic QTEN1"));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let mut pos = 9;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u64(bytes, pos)?;
        if d == 0 {
            return Err(format_err(pos, "dimensions must be positive"));
        }
        shape.push(d as usize);
        pos += 8;
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(9, "shape overflows"))?;
    if bytes.len() != pos + 8 * n {
        return Err(format_err(pos, format!("payload holds {} bytes, shape needs {}", bytes.len() - pos, 8 * n)));
    }
    let data: Vec<f64> = bytes[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(pos + 8 * i, "non-finite value"));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, x: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_tensor(x))?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OIQA1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub id: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub dft_convention: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub score_range: Option<ScoreRange>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `OIQA1`, `u64` header length, JSON header, `f64` payload.
pub fn encode_checkpoint(model: &ModelGraph) -> Result<Vec<u8>> {
    model.validate()?;
    let mut payload = Vec::with_capacity(8 * model.param_count());
    let mut tensors = Vec::with_capacity(model.params.len());
    for (id, t) in &model.params {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { id: id.clone(), shape: t.shape().to_vec(), offset, length: payload.len() as u64 - offset });
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: "real64".into(),
        endianness: "little".into(),
        dft_convention: DFT_CONVENTION.into(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        score_range: model.score_range,
        tensors,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(13 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    let ck = |m: String| Error::Checkpoint(m);
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(ck("missing OIQA1 magic".into()));
    }
    let hlen = read_u64(bytes, 5)? as usize;
    let header_end = 13usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| ck("header length exceeds file".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[13..header_end]).map_err(|e| ck(format!("malformed header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", header.version)));
    }
    if header.dtype != "real64" || header.endianness != "little" {
        return Err(ck(format!("unsupported encoding {}/{}", header.dtype, header.endianness)));
    }
    if header.dft_convention != DFT_CONVENTION {
        return Err(ck(format!("DFT convention {} differs from {DFT_CONVENTION}", header.dft_convention)));
    }
    let payload = &bytes[header_end..];
    let digest = sha256_hex(payload);
    if digest != header.payload_sha256 {
        return Err(ck(format!("payload hash mismatch: header {}, content {digest}", header.payload_sha256)));
    }
    let mut model = ModelGraph::new(header.input_shape);
    model.layers = header.layers;
    model.score_range = header.score_range;
    let mut covered = 0u64;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != 8 * n as u64 || e.offset != covered {
            return Err(ck(format!("tensor {} has inconsistent offset/length", e.id)));
        }
        let start = e.offset as usize;
        let end = start + e.length as usize;
        let chunk = payload.get(start..end).ok_or_else(|| ck(format!("tensor {} runs past the payload", e.id)))?;
        let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| ck(format!("tensor {}: {err}", e.id)))?;
        covered = end as u64;
        model.params.insert(e.id, t);
    }
    if covered != payload.len() as u64 {
        return Err(ck(format!("payload has {} trailing bytes", payload.len() as u64 - covered)));
    }
    model.validate().map_err(|e| ck(format!("invalid model: {e}")))?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    decode_checkpoint(&fs::read(path)?)
}

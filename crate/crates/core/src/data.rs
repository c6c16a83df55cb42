//! Synthetic datasets and the IDX binary format.
//!
//! A dataset is a [`Batch`] holding every sample; training draws minibatches
//! from it by index.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs,
    DeepLinearRegression,
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            "deep_linear_regression" => Ok(Self::DeepLinearRegression),
            other => Err(Error::Argument(format!(
                "unknown dataset kind `{other}` (expected gaussian_blobs or deep_linear_regression)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian_blobs",
            Self::DeepLinearRegression => "deep_linear_regression",
        })
    }
}

/// Parameters shared by both generators. `classes` is ignored for
/// regression and `outputs` for blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub kind: SyntheticKind,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub outputs: usize,
    pub noise: f64,
    /// Radius of the sphere holding the blob centers.
    pub radius: f64,
    /// Input feature `i` is scaled by `condition^(-i / (dim - 1))`, so the
    /// input covariance has condition number about `condition²`.
    #[serde(default = "one")]
    pub condition: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::GaussianBlobs,
            samples: 10_000,
            dim: 64,
            classes: 10,
            outputs: 8,
            noise: 1.0,
            radius: 1.0,
            condition: 1.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.dim == 0 {
            return Err(Error::Argument("samples and dim must be positive".into()));
        }
        if self.kind == SyntheticKind::GaussianBlobs && self.classes < 2 {
            return Err(Error::Argument("gaussian_blobs needs at least 2 classes".into()));
        }
        if self.kind == SyntheticKind::DeepLinearRegression && self.outputs == 0 {
            return Err(Error::Argument("deep_linear_regression needs outputs >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.condition >= 1.0 && self.condition.is_finite()) {
            return Err(Error::Argument(format!("condition must be >= 1, got {}", self.condition)));
        }
        Ok(())
    }
}

pub fn gen_synthetic(params: &SyntheticParams, seed: u64) -> Result<Batch> {
    params.validate()?;
    match params.kind {
        SyntheticKind::GaussianBlobs => gaussian_blobs(params, seed),
        SyntheticKind::DeepLinearRegression => deep_linear_regression(params, seed),
    }
}

fn feature_scales(params: &SyntheticParams) -> Vec<f64> {
    let last = (params.dim.max(2) - 1) as f64;
    (0..params.dim).map(|i| params.condition.powf(-(i as f64) / last)).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `classes` centers drawn uniformly on the sphere of radius `radius`;
/// sample `i` belongs to class `i mod classes` and adds isotropic noise.
pub fn gaussian_blobs(params: &SyntheticParams, seed: u64) -> Result<Batch> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..params.classes)
        .map(|_| {
            let v = gaussian_vec(&mut rng, params.dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * params.radius / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::Argument(e.to_string()))?;
    let labels: Vec<usize> = (0..params.samples).map(|i| i % params.classes).collect();
    let scales = feature_scales(params);
    let mut inputs = Matrix::zeros(params.dim, params.samples);
    for (j, &c) in labels.iter().enumerate() {
        for i in 0..params.dim {
            inputs[(i, j)] = scales[i] * (centers[c][i] + noise.sample(&mut rng));
        }
    }
    Batch::new(inputs, Targets::Classes(labels))
}

/// Inputs `x ~ N(0, I)` before feature scaling, targets `M x + noise` with `M_ij ~ N(0, 1/dim)`.
pub fn deep_linear_regression(params: &SyntheticParams, seed: u64) -> Result<Batch> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (params.dim as f64).sqrt();
    let map = Matrix::from_vec(
        params.outputs,
        params.dim,
        gaussian_vec(&mut rng, params.outputs * params.dim).into_iter().map(|x| x * scale).collect(),
    )?;
    let mut inputs = Matrix::from_vec(params.dim, params.samples, gaussian_vec(&mut rng, params.dim * params.samples))?;
    let scales = feature_scales(params);
    for i in 0..params.dim {
        for j in 0..params.samples {
            inputs[(i, j)] *= scales[i];
        }
    }
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::Argument(e.to_string()))?;
    let mut targets = map.matmul(&inputs)?;
    for v in targets.as_mut_slice() {
        *v += noise.sample(&mut rng);
    }
    Batch::new(inputs, Targets::Values(targets))
}

/// Seeded shuffle, then the last `round(eval_fraction · N)` samples become the
/// evaluation split. A zero fraction gives an empty evaluation set.
pub fn train_eval_split(data: &Batch, eval_fraction: f64, seed: u64) -> Result<(Batch, Option<Batch>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Argument(format!("eval fraction must lie in [0, 1), got {eval_fraction}")));
    }
    let n = data.len();
    let n_eval = (eval_fraction * n as f64).round() as usize;
    if n_eval >= n {
        return Err(Error::Data(format!("eval split of {n_eval} leaves no training samples out of {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = data.select(&idx[..n - n_eval]);
    let eval = (n_eval > 0).then(|| data.select(&idx[n - n_eval..]));
    Ok((train, eval))
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub const IDX_UBYTE: u8 = 0x08;
/// Big-endian IEEE double; the standard defines the code, MNIST never uses it.
pub const IDX_F64: u8 = 0x0E;

/// An IDX array: dimensions plus values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    let dtype = bytes[2];
    let width = match dtype {
        IDX_UBYTE => 1,
        IDX_F64 => 8,
        other => return Err(format_err(2, format!("unsupported element type 0x{other:02x}"))),
    };
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("truncated header: {ndim} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let need = count
        .checked_mul(width)
        .and_then(|b| b.checked_add(header))
        .ok_or_else(|| format_err(4, "payload size overflows"))?;
    if bytes.len() < need {
        return Err(format_err(bytes.len(), format!("truncated payload: expected {need} bytes, found {}", bytes.len())));
    }
    if bytes.len() > need {
        return Err(format_err(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let body = &bytes[header..];
    let data = match dtype {
        IDX_UBYTE => body.iter().map(|&b| b as f64).collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(IdxArray { dtype, dims, data })
}

/// Serializes an array. `ubyte` values must be integers in `0..=255`.
pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let count: usize = array.dims.iter().product();
    if count != array.data.len() || array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::Argument(format!(
            "IDX dims {:?} do not describe {} values",
            array.dims,
            array.data.len()
        )));
    }
    let mut out = vec![0, 0, array.dtype, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("IDX dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    match array.dtype {
        IDX_UBYTE => {
            for &v in &array.data {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Argument(format!("value {v} does not fit an unsigned byte")));
                }
                out.push(v as u8);
            }
        }
        IDX_F64 => {
            for &v in &array.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        other => return Err(Error::Argument(format!("unsupported IDX element type 0x{other:02x}"))),
    }
    Ok(out)
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    crate::io::write_atomic(path, &encode_idx(array)?)
}

/// Builds a dataset from an images file and a labels file.
///
/// Images: first dimension is the sample count, the rest are flattened.
/// Unsigned bytes are scaled to `[0, 1]`; doubles are taken as is.
/// Labels: a 1-D ubyte array gives class indices, a 2-D double array gives
/// regression targets (`N × d_out`).
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Batch> {
    let n = images.dims[0];
    let d: usize = images.dims[1..].iter().product();
    if n == 0 || d == 0 {
        return Err(Error::Data("images file holds no samples".into()));
    }
    if labels.dims[0] != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.dims[0])));
    }
    let scale = if images.dtype == IDX_UBYTE { 1.0 / 255.0 } else { 1.0 };
    let inputs = Matrix::from_fn(d, n, |i, j| images.data[j * d + i] * scale);
    let targets = match (labels.dtype, labels.dims.len()) {
        (IDX_UBYTE, 1) => Targets::Classes(labels.data.iter().map(|&v| v as usize).collect()),
        (IDX_F64, 2) => {
            let k = labels.dims[1];
            Targets::Values(Matrix::from_fn(k, n, |i, j| labels.data[j * k + i]))
        }
        (t, nd) => {
            return Err(Error::Data(format!(
                "labels must be 1-D ubyte or 2-D double, found type 0x{t:02x} with {nd} dimensions"
            )))
        }
    };
    Batch::new(inputs, targets)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Batch> {
    dataset_from_idx(&read_idx(images)?, &read_idx(labels)?)
}

/// Writes a dataset as an image/label IDX pair. Inputs are stored as doubles
/// so synthetic data round-trips exactly.
pub fn save_idx(data: &Batch, images: &Path, labels: &Path) -> Result<()> {
    let (d, n) = data.inputs.shape();
    let img = IdxArray {
        dtype: IDX_F64,
        dims: vec![n, d],
        data: data.inputs.transpose().into_vec(),
    };
    let lbl = match &data.targets {
        Targets::Classes(c) => {
            if let Some(&bad) = c.iter().find(|&&c| c > 255) {
                return Err(Error::Argument(format!("class {bad} does not fit an IDX ubyte label")));
            }
            IdxArray {
                dtype: IDX_UBYTE,
                dims: vec![n],
                data: c.iter().map(|&c| c as f64).collect(),
            }
        }
        Targets::Values(m) => IdxArray {
            dtype: IDX_F64,
            dims: vec![n, m.rows()],
            data: m.transpose().into_vec(),
        },
    };
    write_idx(images, &img)?;
    write_idx(labels, &lbl)
}

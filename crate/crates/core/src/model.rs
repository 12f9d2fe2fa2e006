//! A small per-pixel two-head network with hand-written backpropagation.
//!
//! Each pixel is described by its zero-padded `k x k` RGB neighborhood plus
//! normalized coordinates. A shared rectified affine trunk feeds a softmax
//! segmentation head and a rectified feature head.
//!
//! Checkpoint layout (all integers and values little-endian):
//!
//! ```text
//! magic   b"SRCK"
//! u32     format version (1)
//! u32     array count
//! per array:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then one u64 per dimension
//!   f64   values in row-major order
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::kernels::{FeatMap, GridImage};
use crate::seg_loss::ProbMap;

const MAGIC: &[u8; 4] = b"SRCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Neighborhood side length `k` (odd).
    pub patch: usize,
    /// Trunk width.
    pub hidden: usize,
    pub classes: usize,
    pub feat_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            patch: 5,
            hidden: 64,
            classes: 4,
            feat_dim: 16,
        }
    }
}

impl ModelDims {
    pub fn input_len(&self) -> usize {
        3 * self.patch * self.patch + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 {
            return Err(Error::InvalidParam(format!("patch size {} must be odd", self.patch)));
        }
        if self.hidden == 0 || self.feat_dim == 0 || self.classes < 2 {
            return Err(Error::InvalidParam(format!("degenerate model dims {self:?}")));
        }
        Ok(())
    }
}

/// Trainable arrays. `version` increases on every update so stale caches are detected.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub trunk_w: Array2<f64>,
    pub trunk_b: Array1<f64>,
    pub seg_w: Array2<f64>,
    pub seg_b: Array1<f64>,
    pub feat_w: Array2<f64>,
    pub feat_b: Array1<f64>,
    version: u64,
}

/// Gradients mirroring [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub trunk_w: Array2<f64>,
    pub trunk_b: Array1<f64>,
    pub seg_w: Array2<f64>,
    pub seg_b: Array1<f64>,
    pub feat_w: Array2<f64>,
    pub feat_b: Array1<f64>,
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..=limit))
}

impl ParamSet {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let n_in = dims.input_len();
        Ok(ParamSet {
            trunk_w: glorot(rng, n_in, dims.hidden),
            trunk_b: Array1::zeros(dims.hidden),
            seg_w: glorot(rng, dims.hidden, dims.classes),
            seg_b: Array1::zeros(dims.classes),
            feat_w: glorot(rng, dims.hidden, dims.feat_dim),
            feat_b: Array1::zeros(dims.feat_dim),
            version: 0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        let n_in = self.trunk_w.nrows();
        ModelDims {
            patch: (((n_in - 2) / 3) as f64).sqrt().round() as usize,
            hidden: self.trunk_w.ncols(),
            classes: self.seg_w.ncols(),
            feat_dim: self.feat_w.ncols(),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks the parameters as changed.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            trunk_w: Array2::zeros(self.trunk_w.raw_dim()),
            trunk_b: Array1::zeros(self.trunk_b.raw_dim()),
            seg_w: Array2::zeros(self.seg_w.raw_dim()),
            seg_b: Array1::zeros(self.seg_b.raw_dim()),
            feat_w: Array2::zeros(self.feat_w.raw_dim()),
            feat_b: Array1::zeros(self.feat_b.raw_dim()),
        }
    }

    fn named(&self) -> [(&'static str, Vec<usize>, &[f64]); 6] {
        [
            ("trunk.weight", self.trunk_w.shape().to_vec(), self.trunk_w.as_slice().unwrap()),
            ("trunk.bias", self.trunk_b.shape().to_vec(), self.trunk_b.as_slice().unwrap()),
            ("seg.weight", self.seg_w.shape().to_vec(), self.seg_w.as_slice().unwrap()),
            ("seg.bias", self.seg_b.shape().to_vec(), self.seg_b.as_slice().unwrap()),
            ("feat.weight", self.feat_w.shape().to_vec(), self.feat_w.as_slice().unwrap()),
            ("feat.bias", self.feat_b.shape().to_vec(), self.feat_b.as_slice().unwrap()),
        ]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters flattened in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.named()
            .iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in checkpoint order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::mismatch(self.len(), flat.len()));
        }
        let mut rest = flat;
        for dst in self.slices_mut() {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        self.bump_version();
        Ok(())
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.trunk_w.as_slice_mut().unwrap(),
            self.trunk_b.as_slice_mut().unwrap(),
            self.seg_w.as_slice_mut().unwrap(),
            self.seg_b.as_slice_mut().unwrap(),
            self.feat_w.as_slice_mut().unwrap(),
            self.feat_b.as_slice_mut().unwrap(),
        ]
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let named = self.named();
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, dims, values) in named {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut input)? as usize;
        let mut arrays = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            if name_len > 256 {
                return Err(Error::Format("array name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut input)? as usize;
            if rank == 0 || rank > 2 {
                return Err(Error::Format(format!("array {name} has unsupported rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut input)? as usize);
            }
            let n: usize = dims.iter().product();
            if n > 1 << 24 {
                return Err(Error::Format(format!("array {name} is implausibly large")));
            }
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            arrays.insert(name, (dims, values));
        }
        let mut take2 = |name: &str| -> Result<Array2<f64>> {
            let (dims, values) = arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
            if dims.len() != 2 {
                return Err(Error::Format(format!("array {name} must be rank 2")));
            }
            Array2::from_shape_vec((dims[0], dims[1]), values)
                .map_err(|e| Error::Format(e.to_string()))
        };
        let trunk_w = take2("trunk.weight")?;
        let seg_w = take2("seg.weight")?;
        let feat_w = take2("feat.weight")?;
        let mut take1 = |name: &str, len: usize| -> Result<Array1<f64>> {
            let (dims, values) = arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
            if dims != [len] {
                return Err(Error::Format(format!("array {name} has shape {dims:?}, expected [{len}]")));
            }
            Ok(Array1::from(values))
        };
        let params = ParamSet {
            trunk_b: take1("trunk.bias", trunk_w.ncols())?,
            seg_b: take1("seg.bias", seg_w.ncols())?,
            feat_b: take1("feat.bias", feat_w.ncols())?,
            trunk_w,
            seg_w,
            feat_w,
            version: 0,
        };
        if params.seg_w.nrows() != params.trunk_w.ncols()
            || params.feat_w.nrows() != params.trunk_w.ncols()
        {
            return Err(Error::Format("head input width does not match trunk width".into()));
        }
        let dims = params.dims();
        if dims.input_len() != params.trunk_w.nrows() {
            return Err(Error::Format(format!(
                "trunk input width {} is not 3k^2+2",
                params.trunk_w.nrows()
            )));
        }
        dims.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(params)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl ParamGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        [
            self.trunk_w.as_slice().unwrap(),
            self.trunk_b.as_slice().unwrap(),
            self.seg_w.as_slice().unwrap(),
            self.seg_b.as_slice().unwrap(),
            self.feat_w.as_slice().unwrap(),
            self.feat_b.as_slice().unwrap(),
        ]
        .concat()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        self.trunk_w.scaled_add(scale, &other.trunk_w);
        self.trunk_b.scaled_add(scale, &other.trunk_b);
        self.seg_w.scaled_add(scale, &other.seg_w);
        self.seg_b.scaled_add(scale, &other.seg_b);
        self.feat_w.scaled_add(scale, &other.feat_w);
        self.feat_b.scaled_add(scale, &other.feat_b);
    }

    /// Gradients of the feature head alone.
    pub fn feature_head(&self) -> (&Array2<f64>, &Array1<f64>) {
        (&self.feat_w, &self.feat_b)
    }
}

/// Per-pixel input rows: `k x k` RGB neighborhood (zero outside the image)
/// followed by `x / w` and `y / h`.
pub fn descriptors(image: &GridImage, patch: usize) -> Array2<f64> {
    let shape = image.shape();
    let half = (patch / 2) as isize;
    let cols = 3 * patch * patch + 2;
    let mut out = Array2::zeros((shape.len(), cols));
    let rgb = image.data();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let row = row.as_slice_mut().unwrap();
        let mut c = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                if let Some(j) = shape.offset(i, dx, dy) {
                    row[c..c + 3].copy_from_slice(&rgb[3 * j..3 * j + 3]);
                }
                c += 3;
            }
        }
        let (x, y) = shape.coords(i);
        row[c] = x as f64 / shape.w as f64;
        row[c + 1] = y as f64 / shape.h as f64;
    }
    out
}

/// Activations needed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    hidden: Array2<f64>,
    feat_active: Array2<bool>,
    version: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: ProbMap,
    pub feat: FeatMap,
    pub cache: ForwardCache,
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

pub fn forward(image: &GridImage, params: &ParamSet) -> Result<ForwardOutput> {
    let dims = params.dims();
    let inputs = descriptors(image, dims.patch);
    if inputs.ncols() != params.trunk_w.nrows() {
        return Err(Error::mismatch(params.trunk_w.nrows(), inputs.ncols()));
    }
    let shape: GridShape = image.shape();

    let mut hidden = inputs.dot(&params.trunk_w) + &params.trunk_b;
    relu_in_place(&mut hidden);

    let logits = hidden.dot(&params.seg_w) + &params.seg_b;
    let logits = logits.into_raw_vec_and_offset().0;
    let probs = ProbMap::from_logits(shape, dims.classes, &logits)?;

    let feat_pre = hidden.dot(&params.feat_w) + &params.feat_b;
    if let Some(k) = logits.iter().chain(feat_pre.iter()).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "forward pass",
            iteration: 0,
            scene: String::new(),
            detail: format!("network output entry {k} is not finite"),
        });
    }
    let feat_active = feat_pre.mapv(|v| v > 0.0);
    let feat_vals: Vec<f64> = feat_pre.iter().map(|&v| v.max(0.0)).collect();
    let feat = FeatMap::new(shape, dims.feat_dim, feat_vals)?;

    Ok(ForwardOutput {
        logits,
        probs,
        feat,
        cache: ForwardCache {
            inputs,
            hidden,
            feat_active,
            version: params.version,
        },
    })
}

/// Parameter gradients given upstream gradients on the logits and on the
/// rectified features (both pixel-major, as produced by [`forward`]).
pub fn backward(
    grad_logits: &[f64],
    grad_feat: &[f64],
    cache: &ForwardCache,
    params: &ParamSet,
) -> Result<ParamGrads> {
    if cache.version != params.version {
        return Err(Error::StaleCache {
            cache: cache.version,
            params: params.version,
        });
    }
    let n = cache.hidden.nrows();
    let dims = params.dims();
    let g_logits = Array2::from_shape_vec((n, dims.classes), grad_logits.to_vec())
        .map_err(|_| Error::mismatch(n * dims.classes, grad_logits.len()))?;
    let mut g_feat = Array2::from_shape_vec((n, dims.feat_dim), grad_feat.to_vec())
        .map_err(|_| Error::mismatch(n * dims.feat_dim, grad_feat.len()))?;
    g_feat.zip_mut_with(&cache.feat_active, |g, &on| {
        if !on {
            *g = 0.0
        }
    });

    let hidden_t = cache.hidden.t();
    let seg_w = hidden_t.dot(&g_logits);
    let seg_b = g_logits.sum_axis(Axis(0));
    let feat_w = hidden_t.dot(&g_feat);
    let feat_b = g_feat.sum_axis(Axis(0));

    let mut g_hidden = g_logits.dot(&params.seg_w.t()) + g_feat.dot(&params.feat_w.t());
    g_hidden.zip_mut_with(&cache.hidden, |g, &h| {
        if h <= 0.0 {
            *g = 0.0
        }
    });
    let trunk_w = cache.inputs.t().dot(&g_hidden);
    let trunk_b = g_hidden.sum_axis(Axis(0));

    Ok(ParamGrads {
        trunk_w,
        trunk_b,
        seg_w,
        seg_b,
        feat_w,
        feat_b,
    })
}

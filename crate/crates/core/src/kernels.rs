//! Gaussian pair affinities over position, color and deep features.

use crate::error::{Error, Result};
use crate::grid::GridShape;

/// Bandwidths of the three Gaussian terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    /// Spatial bandwidth in pixels.
    pub sigma1: f64,
    /// Color bandwidth in normalized RGB units.
    pub sigma2: f64,
    /// Deep-feature bandwidth.
    pub sigma3: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            sigma1: 6.0,
            sigma2: 0.5,
            sigma3: 50.0,
        }
    }
}

impl KernelParams {
    pub fn new(sigma1: f64, sigma2: f64, sigma3: f64) -> Result<Self> {
        let p = KernelParams {
            sigma1,
            sigma2,
            sigma3,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("sigma3", self.sigma3),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Which appearance terms enter the pair kernel. Position is always used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelTerms {
    pub color: bool,
    pub feature: bool,
}

impl KernelTerms {
    pub const FULL: KernelTerms = KernelTerms {
        color: true,
        feature: true,
    };
    pub const SHALLOW: KernelTerms = KernelTerms {
        color: true,
        feature: false,
    };
}

/// An RGB image with channels normalized to `[0, 1]`, stored pixel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    shape: GridShape,
    rgb: Vec<f64>,
}

impl GridImage {
    pub fn new(shape: GridShape, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != 3 * shape.len() {
            return Err(Error::mismatch(
                format!("{} channel values", 3 * shape.len()),
                rgb.len(),
            ));
        }
        if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!(
                "color value {v} outside [0, 1]"
            )));
        }
        Ok(GridImage { shape, rgb })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.rgb
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]
    }
}

/// Per-pixel non-negative feature vectors, stored pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatMap {
    shape: GridShape,
    dim: usize,
    data: Vec<f64>,
}

impl FeatMap {
    pub fn new(shape: GridShape, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("feature dimension must be at least 1".into()));
        }
        if data.len() != dim * shape.len() {
            return Err(Error::mismatch(
                format!("{} feature values", dim * shape.len()),
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidParam(format!(
                "feature value {v} is negative or NaN"
            )));
        }
        Ok(FeatMap { shape, dim, data })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
pub(crate) fn spatial_exponent(dx: isize, dy: isize, sigma1: f64) -> f64 {
    ((dx * dx + dy * dy) as f64) / (2.0 * sigma1 * sigma1)
}

#[inline]
pub(crate) fn color_exponent(image: &GridImage, i: usize, j: usize, sigma2: f64) -> f64 {
    let a = &image.rgb[3 * i..3 * i + 3];
    let b = &image.rgb[3 * j..3 * j + 3];
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2) / (2.0 * sigma2 * sigma2)
}

#[inline]
pub(crate) fn feature_exponent(feat: &FeatMap, i: usize, j: usize, sigma3: f64) -> f64 {
    let sq: f64 = feat
        .pixel(i)
        .iter()
        .zip(feat.pixel(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sq / (2.0 * sigma3 * sigma3)
}

fn offset_between(shape: GridShape, i: usize, j: usize) -> (isize, isize) {
    let (ix, iy) = shape.coords(i);
    let (jx, jy) = shape.coords(j);
    (jx as isize - ix as isize, jy as isize - iy as isize)
}

/// Affinity using position, color and (constant) deep features.
///
/// `feat` is read as plain data; nothing downstream differentiates through it.
pub fn kernel_full(
    i: usize,
    j: usize,
    image: &GridImage,
    feat: &FeatMap,
    params: &KernelParams,
) -> f64 {
    kernel_with(i, j, image, feat, params, KernelTerms::FULL)
}

/// Affinity using position and color only.
pub fn kernel_shallow(i: usize, j: usize, image: &GridImage, params: &KernelParams) -> f64 {
    let (dx, dy) = offset_between(image.shape, i, j);
    (-(spatial_exponent(dx, dy, params.sigma1) + color_exponent(image, i, j, params.sigma2)))
        .exp()
}

/// Affinity with a selectable subset of appearance terms.
pub fn kernel_with(
    i: usize,
    j: usize,
    image: &GridImage,
    feat: &FeatMap,
    params: &KernelParams,
    terms: KernelTerms,
) -> f64 {
    let (dx, dy) = offset_between(image.shape, i, j);
    (-pair_exponent(i, j, dx, dy, image, feat, params, terms)).exp()
}

#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_exponent(
    i: usize,
    j: usize,
    dx: isize,
    dy: isize,
    image: &GridImage,
    feat: &FeatMap,
    params: &KernelParams,
    terms: KernelTerms,
) -> f64 {
    let mut e = spatial_exponent(dx, dy, params.sigma1);
    if terms.color {
        e += color_exponent(image, i, j, params.sigma2);
    }
    if terms.feature {
        e += feature_exponent(feat, i, j, params.sigma3);
    }
    e
}

//! Segmentation head losses: partial cross-entropy over scribbles and the
//! dynamic feature regularized pair loss.
//!
//! Both losses report gradients with respect to the pre-softmax logits.

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMask, PairWindow};
use crate::kernels::{pair_exponent, FeatMap, GridImage, KernelParams, KernelTerms};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

/// Per-pixel class distributions, stored pixel-major (`classes` values per pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    shape: GridShape,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Wraps existing distributions after checking range and normalization.
    pub fn new(shape: GridShape, classes: usize, data: Vec<f64>) -> Result<Self> {
        check_len(shape, classes, data.len())?;
        for (i, p) in data.chunks_exact(classes).enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "pixel {i} is not a probability distribution"
                )));
            }
        }
        Ok(ProbMap {
            shape,
            classes,
            data,
        })
    }

    /// Row-wise softmax of `logits`.
    pub fn from_logits(shape: GridShape, classes: usize, logits: &[f64]) -> Result<Self> {
        check_len(shape, classes, logits.len())?;
        let mut data = logits.to_vec();
        for row in data.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        Ok(ProbMap {
            shape,
            classes,
            data,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Most probable class and its probability; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &p) in self.pixel(i).iter().enumerate() {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }
}

fn check_len(shape: GridShape, classes: usize, len: usize) -> Result<()> {
    if classes == 0 {
        return Err(Error::InvalidParam("class count must be at least 1".into()));
    }
    if len != shape.len() * classes {
        return Err(Error::mismatch(
            format!("{} values ({shape} x {classes})", shape.len() * classes),
            len,
        ));
    }
    Ok(())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// A scalar loss and its gradient with respect to the differentiated input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossResult {
    pub fn zero(len: usize) -> Self {
        LossResult {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

/// Maps a gradient on probabilities to a gradient on logits through softmax.
pub fn softmax_backward(probs: &ProbMap, grad_probs: &[f64]) -> Vec<f64> {
    let c = probs.classes;
    let mut out = vec![0.0; grad_probs.len()];
    for ((p, g), o) in probs
        .data
        .chunks_exact(c)
        .zip(grad_probs.chunks_exact(c))
        .zip(out.chunks_exact_mut(c))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..c {
            o[k] = p[k] * (g[k] - dot);
        }
    }
    out
}

/// Cross-entropy averaged over annotated pixels.
pub fn partial_ce(probs: &ProbMap, scribbles: &LabelMask) -> Result<LossResult> {
    if scribbles.shape() != probs.shape {
        return Err(Error::mismatch(probs.shape, scribbles.shape()));
    }
    scribbles.check_classes(probs.classes)?;
    let annotated = scribbles.annotated_count();
    if annotated == 0 {
        return Err(Error::NoAnnotations);
    }
    let c = probs.classes;
    let scale = 1.0 / annotated as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, &label) in scribbles.labels().iter().enumerate() {
        if label == crate::grid::IGNORE {
            continue;
        }
        let t = label as usize;
        let p = probs.pixel(i);
        value -= p[t].max(LOG_EPS).ln();
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = p[k] * scale;
        }
        g[t] -= scale;
    }
    Ok(LossResult {
        value: value * scale,
        grad,
    })
}

/// Pair penalty `k * (1 - <P(i), P(j)>)`.
pub fn pair_phi(i: usize, j: usize, probs: &ProbMap, k: f64) -> f64 {
    let dot: f64 = probs
        .pixel(i)
        .iter()
        .zip(probs.pixel(j))
        .map(|(a, b)| a * b)
        .sum();
    k * (1.0 - dot)
}

/// Regularized loss with the full position + color + feature kernel.
pub fn dfr_loss(
    probs: &ProbMap,
    image: &GridImage,
    feat: &FeatMap,
    window: &PairWindow,
    params: &KernelParams,
) -> Result<LossResult> {
    dfr_loss_with(probs, image, feat, window, params, KernelTerms::FULL)
}

/// Regularized loss summed over ordered window pairs and normalized by pixel count.
///
/// The features only shape the kernel; the returned gradient covers logits alone.
pub fn dfr_loss_with(
    probs: &ProbMap,
    image: &GridImage,
    feat: &FeatMap,
    window: &PairWindow,
    params: &KernelParams,
    terms: KernelTerms,
) -> Result<LossResult> {
    let shape = probs.shape;
    if image.shape() != shape || feat.shape() != shape || window.shape() != shape {
        return Err(Error::mismatch(
            shape,
            format!(
                "image {}, features {}, window {}",
                image.shape(),
                feat.shape(),
                window.shape()
            ),
        ));
    }
    let c = probs.classes;
    let mut value = 0.0;
    let mut grad_p = vec![0.0; probs.data.len()];
    window.for_each_unordered(|i, j, dx, dy| {
        let k = (-pair_exponent(i, j, dx, dy, image, feat, params, terms)).exp();
        let pi = &probs.data[i * c..(i + 1) * c];
        let pj = &probs.data[j * c..(j + 1) * c];
        let mut dot = 0.0;
        for a in 0..c {
            dot += pi[a] * pj[a];
        }
        value += k * (1.0 - dot);
        for a in 0..c {
            grad_p[i * c + a] -= k * pj[a];
            grad_p[j * c + a] -= k * pi[a];
        }
    });
    // each unordered pair stands for (i, j) and (j, i)
    let scale = 2.0 / shape.len() as f64;
    for g in grad_p.iter_mut() {
        *g *= scale;
    }
    Ok(LossResult {
        value: value * scale,
        grad: softmax_backward(probs, &grad_p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::IGNORE;

    fn shape(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    #[test]
    fn softmax_rows_normalize_and_shift() {
        let s = shape(1, 2);
        let p = ProbMap::from_logits(s, 3, &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        let q = ProbMap::from_logits(s, 3, &[11.0, 12.0, 13.0, -50.0, 0.0, 50.0]).unwrap();
        for i in 0..2 {
            assert!((p.pixel(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let s = shape(1, 3);
        let p = ProbMap::new(s, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let m = LabelMask::new(s, vec![0, 1, IGNORE]).unwrap();
        assert_eq!(partial_ce(&p, &m).unwrap().value, 0.0);
    }

    #[test]
    fn ce_uniform_is_log_classes() {
        let s = shape(2, 2);
        let p = ProbMap::new(s, 4, vec![0.25; 16]).unwrap();
        let mut m = LabelMask::filled(s, IGNORE);
        m.set(3, 2);
        let r = partial_ce(&p, &m).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);
        assert!(r.grad[..12].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_errors() {
        let s = shape(2, 2);
        let p = ProbMap::new(s, 2, vec![0.5; 8]).unwrap();
        assert!(matches!(
            partial_ce(&p, &LabelMask::filled(s, IGNORE)),
            Err(Error::NoAnnotations)
        ));
        assert!(partial_ce(&p, &LabelMask::filled(s, 2)).is_err());
        assert!(partial_ce(&p, &LabelMask::filled(shape(1, 4), 0)).is_err());
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let s = shape(1, 1);
        let p = ProbMap::new(s, 2, vec![1.0, 0.0]).unwrap();
        let r = partial_ce(&p, &LabelMask::filled(s, 1)).unwrap();
        assert!((r.value + LOG_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn phi_values() {
        let s = shape(1, 2);
        let one_hot = ProbMap::new(s, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(pair_phi(0, 1, &one_hot, 0.7), 0.0);
        let disjoint = ProbMap::new(s, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pair_phi(0, 1, &disjoint, 0.5), 0.5);
        let mixed = ProbMap::new(s, 2, vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        assert!((pair_phi(0, 1, &mixed, 0.5) - 0.27).abs() < 1e-15);
    }

    fn flat_image(s: GridShape) -> GridImage {
        GridImage::new(s, vec![0.4; 3 * s.len()]).unwrap()
    }

    #[test]
    fn dfr_uniform_closed_form() {
        // position only, radius covering the whole grid, spatial term flattened by a
        // huge sigma1 so every kernel is 1
        let s = shape(3, 4);
        let c = 3;
        let p = ProbMap::new(s, c, vec![1.0 / 3.0; s.len() * c]).unwrap();
        let feat = FeatMap::new(s, 2, vec![1.0; 2 * s.len()]).unwrap();
        let win = PairWindow::new(s, 1).unwrap();
        let params = KernelParams::new(1e12, 0.5, 1.0).unwrap();
        let r = dfr_loss(&p, &flat_image(s), &feat, &win, &params).unwrap();
        let expected = win.pair_count() as f64 * (1.0 - 1.0 / 3.0) / s.len() as f64;
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn dfr_constant_one_hot_is_zero() {
        let s = shape(3, 3);
        let data: Vec<f64> = (0..s.len()).flat_map(|_| [0.0, 1.0, 0.0]).collect();
        let p = ProbMap::new(s, 3, data).unwrap();
        let rgb: Vec<f64> = (0..3 * s.len()).map(|v| (v % 7) as f64 / 7.0).collect();
        let img = GridImage::new(s, rgb).unwrap();
        let feat = FeatMap::new(s, 1, (0..s.len()).map(|v| v as f64).collect()).unwrap();
        let win = PairWindow::new(s, 2).unwrap();
        let r = dfr_loss(&p, &img, &feat, &win, &KernelParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn dfr_rejects_mismatched_shapes() {
        let s = shape(2, 2);
        let p = ProbMap::new(s, 2, vec![0.5; 8]).unwrap();
        let feat = FeatMap::new(shape(1, 4), 1, vec![0.0; 4]).unwrap();
        let win = PairWindow::new(s, 1).unwrap();
        assert!(dfr_loss(&p, &flat_image(s), &feat, &win, &KernelParams::default()).is_err());
    }
}

//! Feature consistency head: confident pseudo-labels, pair relations and the
//! two losses that shape the feature map.
//!
//! Relations are stored per unordered pair `(i, j)` with `j > i`; every such
//! entry stands for both ordered pairs. Set sizes reported by
//! [`PairRelation`] count ordered pairs.

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMask, Pair, PairWindow, IGNORE};
use crate::kernels::{color_exponent, spatial_exponent, FeatMap, GridImage, KernelParams};
use crate::seg_loss::{LossResult, ProbMap, LOG_EPS};

/// Relation label for a pair of same-class pixels.
pub const SAME: u8 = 1;
/// Relation label for a pair of different-class pixels.
pub const DIFFERENT: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: LabelMask,
    pub gamma: f64,
}

impl PseudoLabelMap {
    /// Fraction of pixels carrying a pseudo-label.
    pub fn coverage(&self) -> f64 {
        self.labels.annotated_count() as f64 / self.labels.shape().len() as f64
    }
}

/// Labels each pixel with its argmax class when the top probability is strictly above `gamma`.
pub fn select_pseudo_labels(probs: &ProbMap, gamma: f64) -> PseudoLabelMap {
    let shape = probs.shape();
    let labels = (0..shape.len())
        .map(|i| {
            let (c, p) = probs.argmax(i);
            if p > gamma {
                c as u8
            } else {
                IGNORE
            }
        })
        .collect();
    PseudoLabelMap {
        labels: LabelMask::new(shape, labels).expect("length matches shape"),
        gamma,
    }
}

/// Pairwise supervision derived from a label map over a local window.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRelation {
    window: PairWindow,
    labels: LabelMask,
    background: u8,
    bg_positive: Vec<Pair>,
    fg_positive: Vec<Pair>,
    negative: Vec<Pair>,
}

impl PairRelation {
    pub fn window(&self) -> &PairWindow {
        &self.window
    }

    /// Unordered same-class background pairs.
    pub fn bg_positive(&self) -> &[Pair] {
        &self.bg_positive
    }

    /// Unordered same-class foreground pairs.
    pub fn fg_positive(&self) -> &[Pair] {
        &self.fg_positive
    }

    /// Unordered different-class pairs.
    pub fn negative(&self) -> &[Pair] {
        &self.negative
    }

    /// Ordered set sizes `(|A_bg+|, |A_fg+|, |A-|)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            2 * self.bg_positive.len(),
            2 * self.fg_positive.len(),
            2 * self.negative.len(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.bg_positive.is_empty() && self.fg_positive.is_empty() && self.negative.is_empty()
    }

    /// All unordered pairs with a relation, in no particular grouping.
    pub fn labeled_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.bg_positive
            .iter()
            .chain(&self.fg_positive)
            .chain(&self.negative)
    }

    /// Relation of an ordered pair: [`SAME`], [`DIFFERENT`] or [`IGNORE`].
    pub fn label(&self, i: usize, j: usize) -> u8 {
        if !self.window.contains(i, j) {
            return IGNORE;
        }
        let (a, b) = (self.labels.get(i), self.labels.get(j));
        if a == IGNORE || b == IGNORE {
            IGNORE
        } else if a == b {
            SAME
        } else {
            DIFFERENT
        }
    }

    /// Whether the positive pair `(i, j)` belongs to the background set.
    pub fn is_background(&self, i: usize) -> bool {
        self.labels.get(i) == self.background
    }
}

/// Splits the window pairs with two labeled endpoints into background-positive,
/// foreground-positive and negative sets.
pub fn build_relations(
    labels: &LabelMask,
    window: &PairWindow,
    background_class: u8,
) -> Result<PairRelation> {
    if labels.shape() != window.shape() {
        return Err(Error::mismatch(window.shape(), labels.shape()));
    }
    if background_class == IGNORE {
        return Err(Error::InvalidParam("background class cannot be the ignore label".into()));
    }
    let mut rel = PairRelation {
        window: *window,
        labels: labels.clone(),
        background: background_class,
        bg_positive: Vec::new(),
        fg_positive: Vec::new(),
        negative: Vec::new(),
    };
    let l = labels.labels();
    window.for_each_unordered(|i, j, _, _| {
        let (a, b) = (l[i], l[j]);
        if a == IGNORE || b == IGNORE {
            return;
        }
        if a != b {
            rel.negative.push((i, j));
        } else if a == background_class {
            rel.bg_positive.push((i, j));
        } else {
            rel.fg_positive.push((i, j));
        }
    });
    Ok(rel)
}

fn l1(feat: &FeatMap, i: usize, j: usize) -> f64 {
    feat.pixel(i)
        .iter()
        .zip(feat.pixel(j))
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Similarity `exp(-|F_i - F_j|_1 / d)`.
pub fn feature_distance(i: usize, j: usize, feat: &FeatMap) -> f64 {
    (-l1(feat, i, j) / feat.dim() as f64).exp()
}

/// Adds `scale * sign(F_i - F_j)` to the gradient rows of `i` and subtracts it from `j`.
/// The sign of an exact tie is zero.
#[inline]
fn accumulate_l1_grad(feat: &FeatMap, grad: &mut [f64], i: usize, j: usize, scale: f64) {
    let d = feat.dim();
    let (fi, fj) = (feat.pixel(i), feat.pixel(j));
    for k in 0..d {
        let diff = fi[k] - fj[k];
        let s = if diff > 0.0 {
            scale
        } else if diff < 0.0 {
            -scale
        } else {
            0.0
        };
        grad[i * d + k] += s;
        grad[j * d + k] -= s;
    }
}

fn check_feat(feat: &FeatMap, shape: GridShape) -> Result<()> {
    if feat.shape() != shape {
        return Err(Error::mismatch(shape, feat.shape()));
    }
    Ok(())
}

/// Pulls same-class features together and pushes different-class features apart.
///
/// Each of the three terms is averaged over its own pair set; empty sets
/// contribute nothing.
pub fn feature_distance_loss(feat: &FeatMap, relations: &PairRelation) -> Result<LossResult> {
    check_feat(feat, relations.window.shape())?;
    let d = feat.dim() as f64;
    let mut out = LossResult::zero(feat.data().len());

    for set in [&relations.bg_positive, &relations.fg_positive] {
        if set.is_empty() {
            continue;
        }
        // 2 ordered pairs per entry in both numerator and count
        let scale = 1.0 / set.len() as f64;
        let mut sum = 0.0;
        for &(i, j) in set.iter() {
            let dist = l1(feat, i, j);
            let sim = (-dist / d).exp();
            sum -= sim.clamp(LOG_EPS, 1.0 - LOG_EPS).ln();
            if sim > LOG_EPS && sim < 1.0 - LOG_EPS {
                accumulate_l1_grad(feat, &mut out.grad, i, j, scale / d);
            }
        }
        out.value += sum * scale;
    }

    if !relations.negative.is_empty() {
        let scale = 2.0 / relations.negative.len() as f64;
        let mut sum = 0.0;
        for &(i, j) in &relations.negative {
            let dist = l1(feat, i, j);
            let sim = (-dist / d).exp();
            sum -= (1.0 - sim.clamp(LOG_EPS, 1.0 - LOG_EPS)).ln();
            if sim > LOG_EPS && sim < 1.0 - LOG_EPS {
                let dl = -sim / (d * (1.0 - sim));
                accumulate_l1_grad(feat, &mut out.grad, i, j, scale * dl);
            }
        }
        out.value += sum * scale;
    }
    Ok(out)
}

/// Shallow-kernel weighted L1 feature distance over the labeled window pairs,
/// normalized by pixel count.
pub fn feature_reg_loss(
    feat: &FeatMap,
    image: &GridImage,
    relations: &PairRelation,
    params: &KernelParams,
) -> Result<LossResult> {
    let shape = relations.window.shape();
    check_feat(feat, shape)?;
    if image.shape() != shape {
        return Err(Error::mismatch(shape, image.shape()));
    }
    let d = feat.dim() as f64;
    let scale = 2.0 / shape.len() as f64;
    let mut out = LossResult::zero(feat.data().len());
    let mut sum = 0.0;
    for &(i, j) in relations.labeled_pairs() {
        let (ix, iy) = shape.coords(i);
        let (jx, jy) = shape.coords(j);
        let dx = jx as isize - ix as isize;
        let dy = jy as isize - iy as isize;
        let k = (-(spatial_exponent(dx, dy, params.sigma1)
            + color_exponent(image, i, j, params.sigma2)))
        .exp();
        sum += k * l1(feat, i, j) / d;
        accumulate_l1_grad(feat, &mut out.grad, i, j, scale * k / d);
    }
    out.value = sum * scale;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    #[test]
    fn pseudo_label_threshold() {
        let s = shape(1, 3);
        let p = ProbMap::new(s, 2, vec![0.99, 0.01, 0.97, 0.03, 0.5, 0.5]).unwrap();
        let m = select_pseudo_labels(&p, 0.98);
        assert_eq!(m.labels.labels(), &[0, IGNORE, IGNORE]);
        assert!((m.coverage() - 1.0 / 3.0).abs() < 1e-15);
        // strictly greater than gamma
        let q = ProbMap::new(shape(1, 1), 2, vec![0.75, 0.25]).unwrap();
        assert_eq!(select_pseudo_labels(&q, 0.75).labels.get(0), IGNORE);
    }

    #[test]
    fn uniform_relations_are_all_positive() {
        let s = shape(3, 3);
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&LabelMask::filled(s, 2), &win, 0).unwrap();
        assert!(rel.negative().is_empty());
        assert!(rel.bg_positive().is_empty());
        assert_eq!(rel.counts().1, win.pair_count());
    }

    #[test]
    fn checkerboard_relations() {
        let s = shape(4, 4);
        let labels = (0..16).map(|i| ((i % 4 + i / 4) % 2) as u8).collect();
        let mask = LabelMask::new(s, labels).unwrap();
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&mask, &win, 0).unwrap();
        for (i, j) in win.pairs() {
            let (ix, iy) = s.coords(i);
            let (jx, jy) = s.coords(j);
            let diagonal = ix != jx && iy != jy;
            assert_eq!(rel.label(i, j), if diagonal { SAME } else { DIFFERENT });
            assert_eq!(rel.label(i, j), rel.label(j, i));
        }
        // 24 axis-adjacent and 18 diagonal unordered pairs
        assert_eq!(rel.negative().len(), 24);
        assert_eq!(rel.bg_positive().len() + rel.fg_positive().len(), 18);
    }

    #[test]
    fn ignored_endpoint_drops_pair() {
        let s = shape(1, 2);
        let mask = LabelMask::new(s, vec![1, IGNORE]).unwrap();
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&mask, &win, 0).unwrap();
        assert!(rel.is_empty());
        assert_eq!(rel.label(0, 1), IGNORE);
        assert_eq!(rel.label(0, 0), IGNORE);
    }

    #[test]
    fn feature_distance_values() {
        let s = shape(1, 2);
        let f = FeatMap::new(s, 4, vec![1.0, 2.0, 0.0, 3.0, 1.5, 1.5, 0.5, 3.5]).unwrap();
        assert!((feature_distance(0, 1, &f) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(feature_distance(0, 1, &f), feature_distance(1, 0, &f));
        assert_eq!(feature_distance(1, 1, &f), 1.0);
    }

    #[test]
    fn empty_relations_give_zero() {
        let s = shape(2, 2);
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&LabelMask::filled(s, IGNORE), &win, 0).unwrap();
        let f = FeatMap::new(s, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let img = GridImage::new(s, vec![0.5; 12]).unwrap();
        let fd = feature_distance_loss(&f, &rel).unwrap();
        let fr = feature_reg_loss(&f, &img, &rel, &KernelParams::default()).unwrap();
        for r in [fd, fr] {
            assert_eq!(r.value, 0.0);
            assert!(r.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn identical_positive_features_cost_nothing() {
        let s = shape(2, 2);
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&LabelMask::filled(s, 0), &win, 0).unwrap();
        let f = FeatMap::new(s, 3, vec![0.7; 12]).unwrap();
        let r = feature_distance_loss(&f, &rel).unwrap();
        assert!(r.value.abs() < 1e-7, "{}", r.value);
    }

    #[test]
    fn single_negative_pair_with_identical_features_is_clamped() {
        let s = shape(1, 2);
        let mask = LabelMask::new(s, vec![0, 1]).unwrap();
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&mask, &win, 0).unwrap();
        let f = FeatMap::new(s, 2, vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let r = feature_distance_loss(&f, &rel).unwrap();
        let expected = -2.0 * (1.0 - (1.0 - LOG_EPS)).ln();
        assert!((r.value - expected).abs() < 1e-6 * expected);
        assert!(r.value.is_finite());
    }

    #[test]
    fn gradient_descent_pulls_and_pushes() {
        let s = shape(1, 2);
        let win = PairWindow::new(s, 1).unwrap();
        let f = FeatMap::new(s, 2, vec![1.0, 2.0, 1.5, 0.5]).unwrap();
        let dist = |f: &FeatMap| l1(f, 0, 1);
        let step = |f: &FeatMap, g: &[f64]| {
            let data = f.data().iter().zip(g).map(|(v, g)| v - 0.01 * g).collect();
            FeatMap::new(s, 2, data).unwrap()
        };
        for (labels, closer) in [(vec![0, 0], true), (vec![2, 2], true), (vec![0, 1], false)] {
            let rel = build_relations(&LabelMask::new(s, labels).unwrap(), &win, 0).unwrap();
            let g = feature_distance_loss(&f, &rel).unwrap().grad;
            let moved = step(&f, &g);
            assert_eq!(dist(&moved) < dist(&f), closer);
        }
    }

    #[test]
    fn constant_features_have_no_regularization() {
        let s = shape(3, 3);
        let win = PairWindow::new(s, 1).unwrap();
        let rel = build_relations(&LabelMask::filled(s, 1), &win, 0).unwrap();
        let f = FeatMap::new(s, 2, vec![4.0; 18]).unwrap();
        let img = GridImage::new(s, (0..27).map(|v| v as f64 / 27.0).collect()).unwrap();
        let r = feature_reg_loss(&f, &img, &rel, &KernelParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
    }
}

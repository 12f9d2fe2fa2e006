//! Pixel grid geometry: shapes, local pair windows and label masks.
//!
//! Pixels are addressed by their flattened row-major index `i = y * w + x`.
//! Every pairwise loss in the crate iterates the same Chebyshev window of
//! radius `r` around each pixel, so the window lives here.

use std::fmt;

use crate::error::{Error, Result};

/// Label value marking an unannotated pixel (or an ignored pair).
pub const IGNORE: u8 = 255;

/// An ordered pair of flattened pixel indices.
pub type Pair = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape { h, w });
        }
        Ok(GridShape { h, w })
    }

    /// Number of pixels.
    #[inline]
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column/row coordinates `(x, y)` of a flattened index.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.w, i / self.w)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.w + x
    }

    /// Index of `(x + dx, y + dy)` if it lies inside the grid.
    #[inline]
    pub fn offset(&self, i: usize, dx: isize, dy: isize) -> Option<usize> {
        let (x, y) = self.coords(i);
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= self.w as isize || ny >= self.h as isize {
            None
        } else {
            Some(ny as usize * self.w + nx as usize)
        }
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// The set of pixel pairs whose x and y offsets are both at most `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairWindow {
    radius: usize,
    shape: GridShape,
}

impl PairWindow {
    pub fn new(shape: GridShape, radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::InvalidParam("window radius must be at least 1".into()));
        }
        Ok(PairWindow { radius, shape })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Whether `(i, j)` is a pair of the window (distinct pixels, Chebyshev distance ≤ r).
    pub fn contains(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (ix, iy) = self.shape.coords(i);
        let (jx, jy) = self.shape.coords(j);
        ix.abs_diff(jx) <= self.radius && iy.abs_diff(jy) <= self.radius
    }

    /// All ordered pairs in row-major order over `i`, then row-major over offsets.
    pub fn pairs(&self) -> Vec<Pair> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for i in 0..self.shape.len() {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if let Some(j) = self.shape.offset(i, dx, dy) {
                        out.push((i, j));
                    }
                }
            }
        }
        out
    }

    /// Offsets that point forward in row-major order. Together with their
    /// negations they cover the window exactly once.
    pub fn forward_offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1) / 2) as usize);
        for dy in 0..=r {
            for dx in -r..=r {
                if dy > 0 || dx > 0 {
                    out.push((dx, dy));
                }
            }
        }
        out
    }

    /// Visits every unordered pair once as `(i, j, dx, dy)` with `j > i`.
    ///
    /// Each call corresponds to the two ordered pairs `(i, j)` and `(j, i)`.
    pub fn for_each_unordered<F>(&self, mut f: F)
    where
        F: FnMut(usize, usize, isize, isize),
    {
        let offsets = self.forward_offsets();
        let (h, w) = (self.shape.h as isize, self.shape.w as isize);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                for &(dx, dy) in &offsets {
                    let nx = x + dx;
                    let ny = y + dy;
                    if nx < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    f(i, (ny * w + nx) as usize, dx, dy);
                }
            }
        }
    }

    /// Number of ordered pairs in the window.
    pub fn pair_count(&self) -> usize {
        let mut n = 0;
        self.for_each_unordered(|_, _, _, _| n += 2);
        n
    }
}

/// Ordered pairs `(i, j)`, `i != j`, within Chebyshev distance `r`.
pub fn enumerate_pairs(shape: GridShape, r: usize) -> Result<Vec<Pair>> {
    Ok(PairWindow::new(shape, r)?.pairs())
}

/// Keeps the pairs whose endpoints are both labeled in `mask`.
pub fn filter_pairs(shape: GridShape, pairs: &[Pair], mask: &LabelMask) -> Result<Vec<Pair>> {
    if mask.shape() != shape {
        return Err(Error::mismatch(shape, mask.shape()));
    }
    Ok(pairs
        .iter()
        .copied()
        .filter(|&(i, j)| mask.is_labeled(i) && mask.is_labeled(j))
        .collect())
}

/// Per-pixel class labels with [`IGNORE`] marking unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    shape: GridShape,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: GridShape, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::mismatch(
                format!("{} labels", shape.len()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(LabelMask { shape, labels })
    }

    pub fn filled(shape: GridShape, label: u8) -> Self {
        LabelMask {
            shape,
            labels: vec![label; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        self.labels[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, label: u8) {
        self.labels[i] = label;
    }

    #[inline]
    pub fn is_labeled(&self, i: usize) -> bool {
        self.labels[i] != IGNORE
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Checks that every non-ignored label is a valid class index.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize >= classes)
        {
            Some(i) => Err(Error::InvalidParam(format!(
                "label {} at pixel {} is not below class count {}",
                self.labels[i], i, classes
            ))),
            None => Ok(()),
        }
    }
}

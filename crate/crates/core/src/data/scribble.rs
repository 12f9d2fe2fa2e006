use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LabelMask, IGNORE};

use super::{distance_to_outside, splitmix64};

const DIRECTIONS: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// How strokes are drawn inside each connected region of the dense mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScribbleSpec {
    pub strokes_per_region: usize,
    /// Stroke length as a fraction of the region's larger bounding-box side.
    pub length_fraction: f64,
    pub seed: u64,
}

impl Default for ScribbleSpec {
    fn default() -> Self {
        ScribbleSpec {
            strokes_per_region: 1,
            length_fraction: 0.7,
            seed: 0,
        }
    }
}

/// 4-connected components of equal label, ordered by their first pixel.
pub(crate) fn components(mask: &LabelMask) -> Vec<Vec<usize>> {
    let shape = mask.shape();
    let mut seen = vec![false; shape.len()];
    let mut out = Vec::new();
    for start in 0..shape.len() {
        if seen[start] || !mask.is_labeled(start) {
            continue;
        }
        let label = mask.get(start);
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(j) = shape.offset(i, dx, dy) {
                    if !seen[j] && mask.get(j) == label {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Draws random-walk strokes, one pixel thick, inside every region eroded by
/// one pixel. Regions too thin to erode get their deepest pixel labeled.
pub fn generate_scribbles(mask: &LabelMask, spec: &ScribbleSpec) -> Result<LabelMask> {
    if !(spec.length_fraction > 0.0) {
        return Err(Error::InvalidParam("stroke length fraction must be positive".into()));
    }
    if spec.strokes_per_region == 0 {
        return Err(Error::InvalidParam("need at least one stroke per region".into()));
    }
    let shape = mask.shape();
    let depth = distance_to_outside(shape, |i| mask.is_labeled(i), |i, j| mask.get(i) == mask.get(j));
    let mut out = LabelMask::filled(shape, IGNORE);

    for (ci, comp) in components(mask).iter().enumerate() {
        let label = mask.get(comp[0]);
        let interior: Vec<usize> = comp.iter().copied().filter(|&i| depth[i] >= 2).collect();
        if interior.is_empty() {
            let deepest = comp.iter().copied().max_by_key(|&i| (depth[i], usize::MAX - i)).unwrap();
            out.set(deepest, label);
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &i in comp {
            let (x, y) = shape.coords(i);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let diameter = (x1 - x0 + 1).max(y1 - y0 + 1) as f64;
        let length = ((spec.length_fraction * diameter).round() as usize).max(1);

        for s in 0..spec.strokes_per_region {
            let seed = splitmix64(spec.seed ^ splitmix64(((ci as u64) << 16) | s as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut at = interior[rng.gen_range(0..interior.len())];
            let mut dir = rng.gen_range(0..8usize);
            out.set(at, label);
            for _ in 1..length {
                // the walk draws the same random numbers whatever the length,
                // so shorter strokes are prefixes of longer ones
                let turn: f64 = rng.gen();
                if turn < 0.15 {
                    dir = (dir + 1) % 8;
                } else if turn < 0.3 {
                    dir = (dir + 7) % 8;
                }
                let next = [0usize, 1, 7, 2, 6, 3, 5].iter().find_map(|&t| {
                    let d = (dir + t) % 8;
                    let (dx, dy) = DIRECTIONS[d];
                    shape
                        .offset(at, dx, dy)
                        .filter(|&j| mask.get(j) == label && depth[j] >= 2)
                        .map(|j| (j, d))
                });
                match next {
                    Some((j, d)) => {
                        at = j;
                        dir = d;
                        out.set(at, label);
                    }
                    None => break,
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of pixels carrying an annotation.
pub fn annotated_fraction(scribbles: &LabelMask) -> f64 {
    scribbles.annotated_count() as f64 / scribbles.shape().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneSampler};
    use crate::grid::GridShape;

    fn dense(seed: u64) -> LabelMask {
        let sampler = SceneSampler::new(GridShape::new(48, 48).unwrap(), 4, false);
        generate_scene(&sampler.sample(seed).unwrap()).unwrap().1
    }

    #[test]
    fn strokes_agree_with_dense_labels_and_cover_classes() {
        for seed in 0..10 {
            let gt = dense(seed);
            let spec = ScribbleSpec {
                length_fraction: 1.0,
                seed,
                ..Default::default()
            };
            let s = generate_scribbles(&gt, &spec).unwrap();
            for i in 0..gt.shape().len() {
                if s.is_labeled(i) {
                    assert_eq!(s.get(i), gt.get(i));
                }
            }
            let mut present: Vec<u8> = gt.labels().to_vec();
            present.sort_unstable();
            present.dedup();
            for c in present {
                assert!(s.labels().contains(&c), "seed {seed} class {c}");
            }
        }
    }

    #[test]
    fn strokes_avoid_region_boundaries() {
        let gt = dense(3);
        let s = generate_scribbles(&gt, &ScribbleSpec::default()).unwrap();
        let shape = gt.shape();
        for i in (0..shape.len()).filter(|&i| s.is_labeled(i)) {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let j = shape.offset(i, dx, dy).expect("stroke touches image border");
                    assert_eq!(gt.get(j), gt.get(i));
                }
            }
        }
    }

    #[test]
    fn shorter_strokes_annotate_fewer_pixels() {
        let mut short_total = 0;
        let mut long_total = 0;
        for seed in 0..10 {
            let gt = dense(seed);
            let mk = |f| ScribbleSpec {
                length_fraction: f,
                seed,
                ..Default::default()
            };
            let short = generate_scribbles(&gt, &mk(0.3)).unwrap().annotated_count();
            let long = generate_scribbles(&gt, &mk(1.0)).unwrap().annotated_count();
            assert!(short <= long);
            short_total += short;
            long_total += long;
        }
        assert!(short_total < long_total);
    }

    #[test]
    fn thin_region_gets_single_pixel() {
        let shape = GridShape::new(3, 5).unwrap();
        let mut labels = vec![0u8; 15];
        labels[7] = 2;
        let gt = LabelMask::new(shape, labels).unwrap();
        let s = generate_scribbles(&gt, &ScribbleSpec::default()).unwrap();
        assert_eq!(s.get(7), 2);
        assert_eq!(s.labels().iter().filter(|&&l| l == 2).count(), 1);
    }

    #[test]
    fn default_annotation_is_sparse() {
        let total: f64 = (0..20)
            .map(|seed| {
                let spec = ScribbleSpec {
                    seed,
                    ..Default::default()
                };
                annotated_fraction(&generate_scribbles(&dense(seed), &spec).unwrap())
            })
            .sum();
        let mean = total / 20.0;
        assert!((0.015..0.045).contains(&mean), "mean annotated fraction {mean}");
    }
}

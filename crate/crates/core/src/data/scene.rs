use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMask};
use crate::kernels::GridImage;

use super::distance_to_outside;

/// Attempts per shape before placement gives up.
pub const PLACEMENT_RETRIES: usize = 400;
/// Full layouts attempted before giving up.
pub const LAYOUT_RESTARTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

/// Mean fill color plus uniform per-pixel, per-channel noise of the given amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub color: [f64; 3],
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class: u8,
    /// Disk radius, or half the side of a rectangle's larger dimension.
    pub size: usize,
    /// Height/width ratio for rectangles, in (0, 1].
    pub aspect: f64,
    pub appearance: Appearance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: GridShape,
    pub classes: usize,
    pub background: Appearance,
    pub shapes: Vec<ShapeSpec>,
    /// Place the second shape touching the first; they must differ in class and share a color.
    pub ambiguous: bool,
    /// Blend towards white on the outermost ring of each shape, fading inwards
    /// over `rim_width` pixels. Scribbles never reach that ring.
    pub rim_highlight: f64,
    pub rim_width: f64,
    pub seed: u64,
}

/// Per-class appearance used when sampling random scenes. Index 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub classes: Vec<Appearance>,
}

impl Palette {
    /// Evenly spaced saturated hues for the foreground classes over a dark background.
    ///
    /// Every foreground class gets its own noise amplitude so that classes
    /// sharing a color still differ in texture.
    pub fn spread(classes: usize) -> Self {
        let mut out = vec![Appearance {
            color: [0.08, 0.08, 0.08],
            noise: 0.05,
        }];
        let fg = classes.saturating_sub(1).max(1);
        for k in 0..classes.saturating_sub(1) {
            let hue = k as f64 / fg as f64;
            let grain = if fg > 1 { k as f64 / (fg - 1) as f64 } else { 0.0 };
            out.push(Appearance {
                color: hsv_to_rgb(hue, 0.9, 0.95),
                noise: 0.02 + 0.12 * grain,
            });
        }
        Palette { classes: out }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Options for sampling a random [`SceneSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSampler {
    pub shape: GridShape,
    pub classes: usize,
    pub palette: Palette,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub ambiguous: bool,
    /// Share of the first shape's fill color taken by its ambiguous partner;
    /// the rest is the partner's own class color.
    pub mimicry: f64,
    pub rim_highlight: f64,
    pub rim_width: f64,
}

impl SceneSampler {
    pub fn new(shape: GridShape, classes: usize, ambiguous: bool) -> Self {
        let side = shape.h.min(shape.w);
        SceneSampler {
            shape,
            classes,
            palette: Palette::spread(classes),
            min_shapes: 2,
            max_shapes: 4,
            min_size: (side / 10).max(2),
            max_size: (side / 5).max(3),
            ambiguous,
            mimicry: 0.85,
            rim_highlight: 0.6,
            rim_width: 1.0,
        }
    }

    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        if self.classes < 2 {
            return Err(Error::InvalidParam("scenes need at least 2 classes".into()));
        }
        if self.palette.classes.len() < self.classes {
            return Err(Error::InvalidParam("palette has fewer entries than classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce_e5ec);
        let count = rng.gen_range(self.min_shapes..=self.max_shapes.max(self.min_shapes));
        let fg: Vec<u8> = (1..self.classes as u8).collect();
        let mut shapes = Vec::with_capacity(count);
        for n in 0..count {
            let class = if self.ambiguous && n == 1 && fg.len() > 1 {
                let first = shapes.first().map(|s: &ShapeSpec| s.class).unwrap_or(1);
                let others: Vec<u8> = fg.iter().copied().filter(|&c| c != first).collect();
                *others.choose(&mut rng).unwrap()
            } else {
                *fg.choose(&mut rng).unwrap()
            };
            let mut appearance = self.palette.classes[class as usize];
            if self.ambiguous && n == 1 {
                if let Some(first) = shapes.first() {
                    let m = self.mimicry;
                    for ch in 0..3 {
                        appearance.color[ch] =
                            m * first.appearance.color[ch] + (1.0 - m) * appearance.color[ch];
                    }
                }
            }
            shapes.push(ShapeSpec {
                kind: if rng.gen_bool(0.5) {
                    ShapeKind::Disk
                } else {
                    ShapeKind::Rectangle
                },
                class,
                size: rng.gen_range(self.min_size..=self.max_size),
                aspect: rng.gen_range(0.6..=1.0),
                appearance,
            });
        }
        Ok(SceneSpec {
            shape: self.shape,
            classes: self.classes,
            background: self.palette.classes[0],
            shapes,
            ambiguous: self.ambiguous && count >= 2 && self.classes >= 3,
            rim_highlight: self.rim_highlight,
            rim_width: self.rim_width,
            seed,
        })
    }
}

/// Rasterizes a shape centred at `(cx, cy)`; `None` if any pixel falls outside the grid.
fn rasterize(spec: &ShapeSpec, cx: isize, cy: isize, grid: GridShape) -> Option<Vec<usize>> {
    let r = spec.size as isize;
    let (hx, hy) = match spec.kind {
        ShapeKind::Disk => (r, r),
        ShapeKind::Rectangle => (r, ((r as f64) * spec.aspect).round().max(1.0) as isize),
    };
    if cx - hx < 0 || cy - hy < 0 || cx + hx >= grid.w as isize || cy + hy >= grid.h as isize {
        return None;
    }
    let mut px = Vec::new();
    for y in cy - hy..=cy + hy {
        for x in cx - hx..=cx + hx {
            let inside = match spec.kind {
                ShapeKind::Disk => {
                    let (dx, dy) = (x - cx, y - cy);
                    dx * dx + dy * dy <= r * r
                }
                ShapeKind::Rectangle => true,
            };
            if inside {
                px.push(grid.index(x as usize, y as usize));
            }
        }
    }
    Some(px)
}

fn touches(grid: GridShape, owner: &[i32], pixels: &[usize], other: i32) -> bool {
    pixels.iter().any(|&i| {
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .filter_map(|&(dx, dy)| grid.offset(i, dx, dy))
            .any(|j| owner[j] == other)
    })
}

/// Assigns every pixel to a shape index, or -1 for background.
fn place_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<i32>> {
    let grid = spec.shape;
    // -1 = background, otherwise shape index
    let mut owner = vec![-1i32; grid.len()];

    for (n, shape) in spec.shapes.iter().enumerate() {
        let partner = spec.ambiguous && n == 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let pixels = if partner {
                // march outwards from the first shape until the candidate stops overlapping it
                let (ax, ay) = centroid(grid, &owner, 0);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut found = None;
                for step in 0..2 * (grid.h + grid.w) {
                    let dist = step as f64 * 0.5;
                    let cx = (ax + dist * angle.cos()).round() as isize;
                    let cy = (ay + dist * angle.sin()).round() as isize;
                    let Some(px) = rasterize(shape, cx, cy, grid) else {
                        break;
                    };
                    if px.iter().all(|&i| owner[i] != 0) {
                        found = Some(px);
                        break;
                    }
                }
                match found {
                    Some(px) => px,
                    None => continue,
                }
            } else {
                let cx = rng.gen_range(0..grid.w as isize);
                let cy = rng.gen_range(0..grid.h as isize);
                match rasterize(shape, cx, cy, grid) {
                    Some(px) => px,
                    None => continue,
                }
            };
            if pixels.iter().any(|&i| owner[i] >= 0) {
                continue;
            }
            // shapes keep a one-pixel gap, except the ambiguous partner which must touch shape 0
            let mut ok = true;
            for other in 0..n as i32 {
                let t = touches(grid, &owner, &pixels, other);
                if partner && other == 0 {
                    ok &= t;
                } else {
                    ok &= !t;
                }
            }
            if !ok {
                continue;
            }
            for &i in &pixels {
                owner[i] = n as i32;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                index: n,
                retries: PLACEMENT_RETRIES,
            });
        }
    }

    Ok(owner)
}

/// Renders a scene: the image and its dense ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<(GridImage, LabelMask)> {
    let grid = spec.shape;
    if spec.classes < 2 {
        return Err(Error::InvalidParam("scenes need at least 2 classes".into()));
    }
    if let Some(s) = spec.shapes.iter().find(|s| s.class == 0 || s.class as usize >= spec.classes) {
        return Err(Error::InvalidParam(format!(
            "shape class {} must be a foreground class below {}",
            s.class, spec.classes
        )));
    }
    if spec.ambiguous && (spec.shapes.len() < 2 || spec.shapes[0].class == spec.shapes[1].class) {
        return Err(Error::InvalidParam(
            "ambiguous scenes need two leading shapes of different classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layout = place_shapes(spec, &mut rng);
    for _ in 1..LAYOUT_RESTARTS {
        if layout.is_ok() {
            break;
        }
        layout = place_shapes(spec, &mut rng);
    }
    let owner = layout?;

    let labels: Vec<u8> = owner
        .iter()
        .map(|&o| if o < 0 { 0 } else { spec.shapes[o as usize].class })
        .collect();
    let mask = LabelMask::new(grid, labels)?;

    // depth inside each shape drives the rim highlight
    let depth = distance_to_outside(grid, |i| owner[i] >= 0, |i, j| owner[i] == owner[j]);
    let mut rgb = Vec::with_capacity(3 * grid.len());
    for i in 0..grid.len() {
        let app = if owner[i] < 0 {
            spec.background
        } else {
            spec.shapes[owner[i] as usize].appearance
        };
        let highlight = if owner[i] >= 0 {
            let t = ((depth[i] as f64 - 1.0) / spec.rim_width.max(1e-9)).clamp(0.0, 1.0);
            spec.rim_highlight * (1.0 - t)
        } else {
            0.0
        };
        for ch in 0..3 {
            let noise = if app.noise > 0.0 {
                rng.gen_range(-app.noise..=app.noise)
            } else {
                0.0
            };
            let base = app.color[ch] + (1.0 - app.color[ch]) * highlight;
            rgb.push((base + noise).clamp(0.0, 1.0));
        }
    }
    Ok((GridImage::new(grid, rgb)?, mask))
}

fn centroid(grid: GridShape, owner: &[i32], shape: i32) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &o) in owner.iter().enumerate() {
        if o == shape {
            let (x, y) = grid.coords(i);
            sx += x as f64;
            sy += y as f64;
            n += 1.0;
        }
    }
    (sx / n, sy / n)
}

//! Synthetic scribble-supervised segmentation data.
//!
//! Scenes are colored rectangles and disks on a background. With the
//! ambiguity flag, two shapes of different classes share a fill color and
//! touch, so color alone cannot separate them.
//!
//! On disk a dataset is a directory holding `manifest.txt` plus binary P6
//! images and P5 masks (255 = unannotated). The manifest format is
//!
//! ```text
//! scribreg-manifest 1
//! classes <C>
//! scene <id> <train|val> <ambiguous 0|1> <image.ppm> <dense.pgm> <scribble.pgm>
//! ```
//!
//! with paths relative to the manifest's directory.

mod pnm;
mod scene;
mod scribble;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use scene::{
    generate_scene, Appearance, Palette, SceneSampler, SceneSpec, ShapeKind, ShapeSpec,
    PLACEMENT_RETRIES,
};
pub use scribble::{annotated_fraction, generate_scribbles, ScribbleSpec};

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMask};
use crate::kernels::GridImage;

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "scribreg-manifest 1";

/// Seeds of validation scenes start this far above the base seed.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Chebyshev depth of each pixel inside its region: 1 on the region border
/// (or the image border), growing inwards; 0 outside every region.
pub(crate) fn distance_to_outside(
    shape: GridShape,
    in_region: impl Fn(usize) -> bool,
    same_region: impl Fn(usize, usize) -> bool,
) -> Vec<u32> {
    let mut depth = vec![0u32; shape.len()];
    let mut queue = VecDeque::new();
    for i in 0..shape.len() {
        if !in_region(i) {
            continue;
        }
        let border = (-1..=1).any(|dy| {
            (-1..=1).any(|dx| match shape.offset(i, dx, dy) {
                Some(j) => !same_region(i, j),
                None => true,
            })
        });
        if border {
            depth[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(j) = shape.offset(i, dx, dy) {
                    if depth[j] == 0 && in_region(j) && same_region(i, j) {
                        depth[j] = depth[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    depth
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: GridImage,
    pub dense: LabelMask,
    pub scribbles: LabelMask,
    pub ambiguous: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Everything needed to regenerate a benchmark bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub sampler: SceneSampler,
    pub strokes_per_region: usize,
    pub length_fraction: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// 200 train and 50 val scenes of 48x48 pixels with 4 classes.
    pub fn default_benchmark(seed: u64) -> Self {
        Self::new(200, 50, GridShape { h: 48, w: 48 }, 4, false, seed)
    }

    /// Same layout as [`default_benchmark`](Self::default_benchmark) with touching
    /// same-color shapes.
    pub fn ambiguous_benchmark(seed: u64) -> Self {
        Self::new(200, 50, GridShape { h: 48, w: 48 }, 4, true, seed)
    }

    /// Ambiguous layouts drop the rim highlight, so color edges are reliable
    /// everywhere except at the ambiguous boundaries.

    pub fn new(
        train_scenes: usize,
        val_scenes: usize,
        shape: GridShape,
        classes: usize,
        ambiguous: bool,
        seed: u64,
    ) -> Self {
        let scribble = ScribbleSpec::default();
        let mut sampler = SceneSampler::new(shape, classes, ambiguous);
        if ambiguous {
            sampler.rim_highlight = 0.0;
        }
        BenchmarkSpec {
            train_scenes,
            val_scenes,
            sampler,
            strokes_per_region: scribble.strokes_per_region,
            length_fraction: scribble.length_fraction,
            seed,
        }
    }

    /// Seed of the `index`-th scene of a split. Train seeds occupy
    /// `[seed, seed + VAL_SEED_OFFSET)`, validation seeds the range above.
    pub fn scene_seed(&self, split: Split, index: usize) -> u64 {
        let base = match split {
            Split::Train => self.seed,
            Split::Val => self.seed.wrapping_add(VAL_SEED_OFFSET),
        };
        base.wrapping_add(index as u64)
    }

    fn scene(&self, split: Split, index: usize) -> Result<Scene> {
        let seed = self.scene_seed(split, index);
        let spec = self.sampler.sample(seed)?;
        let (image, dense) = generate_scene(&spec)?;
        let scribbles = generate_scribbles(
            &dense,
            &ScribbleSpec {
                strokes_per_region: self.strokes_per_region,
                length_fraction: self.length_fraction,
                seed: splitmix64(seed),
            },
        )?;
        Ok(Scene {
            id: format!("{}-{index:04}", split.as_str()),
            image,
            dense,
            scribbles,
            ambiguous: spec.ambiguous,
        })
    }

    pub fn generate(&self) -> Result<Benchmark> {
        if self.train_scenes >= VAL_SEED_OFFSET as usize {
            return Err(Error::InvalidParam("too many training scenes".into()));
        }
        let make = |split, n| -> Result<Vec<Scene>> {
            (0..n).into_par_iter().map(|k| self.scene(split, k)).collect()
        };
        Ok(Benchmark {
            classes: self.sampler.classes,
            train: make(Split::Train, self.train_scenes)?,
            val: make(Split::Val, self.val_scenes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub classes: usize,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Benchmark {
    /// Mean annotated fraction over the training scenes.
    pub fn annotated_fraction(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        self.train
            .iter()
            .map(|s| annotated_fraction(&s.scribbles))
            .sum::<f64>()
            / self.train.len() as f64
    }

    /// Writes images, masks and the manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = format!("{MANIFEST_HEADER}\nclasses {}\n", self.classes);
        for (split, scenes) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            let sub = dir.join(split.as_str());
            fs::create_dir_all(&sub)?;
            for scene in scenes {
                let image = format!("{}/{}.ppm", split.as_str(), scene.id);
                let dense = format!("{}/{}_dense.pgm", split.as_str(), scene.id);
                let scribble = format!("{}/{}_scribble.pgm", split.as_str(), scene.id);
                write_ppm(&dir.join(&image), &scene.image)?;
                write_pgm(&dir.join(&dense), &scene.dense)?;
                write_pgm(&dir.join(&scribble), &scene.scribbles)?;
                writeln!(
                    manifest,
                    "scene {} {} {} {image} {dense} {scribble}",
                    scene.id,
                    split.as_str(),
                    scene.ambiguous as u8
                )
                .unwrap();
            }
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(&dir.join(MANIFEST))?;
        let mut out = Benchmark {
            classes: entries.classes,
            train: Vec::new(),
            val: Vec::new(),
        };
        for e in entries.scenes {
            let image = read_ppm(&dir.join(&e.image))?;
            let dense = read_pgm(&dir.join(&e.dense))?;
            let scribbles = read_pgm(&dir.join(&e.scribble))?;
            if image.shape() != dense.shape() || image.shape() != scribbles.shape() {
                return Err(Error::Format(format!("scene {} has inconsistent sizes", e.id)));
            }
            dense.check_classes(out.classes)?;
            scribbles.check_classes(out.classes)?;
            let scene = Scene {
                id: e.id,
                image,
                dense,
                scribbles,
                ambiguous: e.ambiguous,
            };
            match e.split {
                Split::Train => out.train.push(scene),
                Split::Val => out.val.push(scene),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub ambiguous: bool,
    pub image: PathBuf,
    pub dense: PathBuf,
    pub scribble: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub scenes: Vec<ManifestEntry>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("manifest must start with '{MANIFEST_HEADER}'")));
    }
    let classes = lines
        .next()
        .and_then(|l| l.strip_prefix("classes "))
        .and_then(|c| c.trim().parse::<usize>().ok())
        .filter(|&c| c >= 2)
        .ok_or_else(|| Error::Format("manifest needs a 'classes <C>' line with C >= 2".into()))?;
    let mut scenes = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 || f[0] != "scene" {
            return Err(Error::Format(format!("bad manifest line: {line}")));
        }
        let split = match f[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(Error::Format(format!("unknown split {other}"))),
        };
        let ambiguous = match f[3] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Format(format!("bad ambiguity flag {other}"))),
        };
        scenes.push(ManifestEntry {
            id: f[1].to_string(),
            split,
            ambiguous,
            image: f[4].into(),
            dense: f[5].into(),
            scribble: f[6].into(),
        });
    }
    Ok(Manifest { classes, scenes })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    parse_manifest(&fs::read_to_string(path)?)
}

//! Ablation grids: named config overrides trained side by side.
//!
//! Grid file format, one directive per line (`#` starts a comment):
//!
//! ```text
//! seeds 0 1 2
//! row pce enable_dfr=off enable_fd=off enable_fr=off
//! row pce+dfr enable_fd=off enable_fr=off
//! ```
//!
//! Every row is trained once per seed on top of the base config. Without a
//! `seeds` line the base config's seed is used.

use std::fmt::Write as _;

use crate::data::Scene;
use crate::error::{Error, Result};

use super::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

const LOSS_TERMS: &str = "\
row pce enable_dfr=off enable_fd=off enable_fr=off
row pce+dfr enable_dfr=on enable_fd=off enable_fr=off
row pce+dfr+fd enable_dfr=on enable_fd=on enable_fr=off
row pce+dfr+fd+fr enable_dfr=on enable_fd=on enable_fr=on
";

// rows without a feature term also drop the feature head losses
const KERNEL_TERMS: &str = "\
row XY enable_dfr=on rgb_in_kernel=off feature_in_kernel=off enable_fd=off enable_fr=off
row XY+RGB enable_dfr=on rgb_in_kernel=on feature_in_kernel=off enable_fd=off enable_fr=off
row XY+Feature enable_dfr=on rgb_in_kernel=off feature_in_kernel=on enable_fd=on enable_fr=on
row XY+RGB+Feature enable_dfr=on rgb_in_kernel=on feature_in_kernel=on enable_fd=on enable_fr=on
";

const SUPERVISION: &str = "\
row GT supervision_source=groundtruth_scribbles enable_dfr=on enable_fd=on enable_fr=on
row M supervision_source=pseudo enable_dfr=on enable_fd=on enable_fr=on
row GT+M supervision_source=both enable_dfr=on enable_fd=on enable_fr=on
";

/// Names accepted by [`AblationGrid::preset`].
pub const PRESETS: &[&str] = &["loss-terms", "kernel-terms", "supervision"];

impl AblationGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = AblationGrid {
            seeds: Vec::new(),
            rows: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            let mut words = line.split_whitespace();
            let err = |msg: String| Error::Config(format!("grid line {}: {msg}", n + 1));
            match words.next() {
                None => continue,
                Some("seeds") => {
                    for w in words {
                        grid.seeds.push(w.parse().map_err(|_| err(format!("bad seed {w:?}")))?);
                    }
                }
                Some("row") => {
                    let name = words.next().ok_or_else(|| err("row needs a name".into()))?;
                    let mut overrides = Vec::new();
                    for w in words {
                        let (k, v) = w
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got {w:?}")))?;
                        // reject unknown keys and bad values up front
                        TrainConfig::default().set(k, v).map_err(|e| err(e.to_string()))?;
                        overrides.push((k.to_string(), v.to_string()));
                    }
                    if grid.rows.iter().any(|r| r.name == name) {
                        return Err(err(format!("duplicate row {name}")));
                    }
                    grid.rows.push(AblationRow {
                        name: name.to_string(),
                        overrides,
                    });
                }
                Some(other) => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        if grid.rows.is_empty() {
            return Err(Error::Config("ablation grid has no rows".into()));
        }
        Ok(grid)
    }

    /// Built-in grids: `loss-terms`, `kernel-terms` and `supervision`.
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "loss-terms" => LOSS_TERMS,
            "kernel-terms" => KERNEL_TERMS,
            "supervision" => SUPERVISION,
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in grid parses"))
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    /// The config of `row` under `seed`, layered on `base`.
    pub fn config(&self, base: &TrainConfig, row: &AblationRow, seed: u64) -> Result<TrainConfig> {
        let mut c = base.clone();
        c.seed = seed;
        for (k, v) in &row.overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: String,
    pub seed: u64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub classes: usize,
    pub results: Vec<RowResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,seed,miou,pixel_accuracy");
        for c in 0..self.classes {
            write!(out, ",iou_{c}").unwrap();
        }
        out.push_str(",final_loss\n");
        for r in &self.results {
            write!(out, "{},{},{:.6},{:.6}", r.row, r.seed, r.miou, r.pixel_accuracy).unwrap();
            for iou in &r.per_class {
                match iou {
                    Some(v) => write!(out, ",{v:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{:.6}", r.final_loss).unwrap();
        }
        out
    }

    pub fn miou(&self, row: &str, seed: u64) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.row == row && r.seed == seed)
            .map(|r| r.miou)
    }

    pub fn mean_miou(&self, row: &str) -> Option<f64> {
        let v: Vec<f64> = self.results.iter().filter(|r| r.row == row).map(|r| r.miou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains every row of `grid` for every seed and scores it on `val`.
/// `progress` sees each result as soon as it is available.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    classes: usize,
    train: &[Scene],
    val: &[Scene],
    mut progress: impl FnMut(&RowResult),
) -> Result<AblationTable> {
    if val.is_empty() {
        return Err(Error::InvalidParam("ablation needs validation scenes".into()));
    }
    let seeds = if grid.seeds.is_empty() {
        vec![base.seed]
    } else {
        grid.seeds.clone()
    };
    let mut results = Vec::new();
    for &seed in &seeds {
        for row in &grid.rows {
            let config = grid.config(base, row, seed)?;
            let mut trainer = Trainer::new(config, classes)?;
            let summary = trainer.fit(train, val, |_| Ok(()))?;
            let report = summary.final_eval.expect("validation set is non-empty");
            let result = RowResult {
                row: row.name.clone(),
                seed,
                miou: report.miou,
                pixel_accuracy: report.pixel_accuracy,
                per_class: report.per_class,
                final_loss: summary.last.map(|r| r.total).unwrap_or(f64::NAN),
            };
            progress(&result);
            results.push(result);
        }
    }
    Ok(AblationTable { classes, results })
}

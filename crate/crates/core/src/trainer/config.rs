use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{KernelParams, KernelTerms};
use crate::model::ModelDims;

/// Which labels supervise the feature consistency head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisionSource {
    /// Confident predictions of the segmentation head.
    Pseudo,
    /// The annotated scribbles only.
    GroundtruthScribbles,
    /// Confident predictions, overwritten by scribbles where annotated.
    Both,
}

impl FromStr for SupervisionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(SupervisionSource::Pseudo),
            "groundtruth_scribbles" => Ok(SupervisionSource::GroundtruthScribbles),
            "both" => Ok(SupervisionSource::Both),
            other => Err(Error::Config(format!(
                "supervision_source must be pseudo, groundtruth_scribbles or both, got {other}"
            ))),
        }
    }
}

impl fmt::Display for SupervisionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupervisionSource::Pseudo => "pseudo",
            SupervisionSource::GroundtruthScribbles => "groundtruth_scribbles",
            SupervisionSource::Both => "both",
        })
    }
}

/// Training hyperparameters. Config files use the field names as keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Window radius shared by all pair losses.
    pub r: usize,
    /// Pseudo-label confidence threshold.
    pub gamma: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_dfr: bool,
    pub enable_fd: bool,
    pub enable_fr: bool,
    pub feature_in_kernel: bool,
    pub rgb_in_kernel: bool,
    pub supervision_source: SupervisionSource,
    pub patch: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    /// Evaluate on the validation split every this many iterations (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1e-2,
            lambda2: 1e-3,
            r: 5,
            gamma: 0.98,
            sigma1: 6.0,
            sigma2: 0.5,
            sigma3: 5.0,
            lr: 0.05,
            momentum: 0.9,
            iterations: 2000,
            batch_size: 4,
            seed: 0,
            enable_dfr: true,
            enable_fd: true,
            enable_fr: true,
            feature_in_kernel: true,
            rgb_in_kernel: true,
            supervision_source: SupervisionSource::Pseudo,
            patch: 5,
            hidden: 64,
            feat_dim: 16,
            eval_every: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lambda1",
    "lambda2",
    "r",
    "gamma",
    "sigma1",
    "sigma2",
    "sigma3",
    "lr",
    "momentum",
    "iterations",
    "batch_size",
    "seed",
    "enable_dfr",
    "enable_fd",
    "enable_fr",
    "feature_in_kernel",
    "rgb_in_kernel",
    "supervision_source",
    "patch",
    "hidden",
    "feat_dim",
    "eval_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "r" => self.r = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "sigma1" => self.sigma1 = parse(key, v)?,
            "sigma2" => self.sigma2 = parse(key, v)?,
            "sigma3" => self.sigma3 = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "enable_dfr" => self.enable_dfr = parse_bool(key, v)?,
            "enable_fd" => self.enable_fd = parse_bool(key, v)?,
            "enable_fr" => self.enable_fr = parse_bool(key, v)?,
            "feature_in_kernel" => self.feature_in_kernel = parse_bool(key, v)?,
            "rgb_in_kernel" => self.rgb_in_kernel = parse_bool(key, v)?,
            "supervision_source" => self.supervision_source = v.parse()?,
            "patch" => self.patch = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "r" => self.r.to_string(),
            "gamma" => self.gamma.to_string(),
            "sigma1" => self.sigma1.to_string(),
            "sigma2" => self.sigma2.to_string(),
            "sigma3" => self.sigma3.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "enable_dfr" => self.enable_dfr.to_string(),
            "enable_fd" => self.enable_fd.to_string(),
            "enable_fr" => self.enable_fr.to_string(),
            "feature_in_kernel" => self.feature_in_kernel.to_string(),
            "rgb_in_kernel" => self.rgb_in_kernel.to_string(),
            "supervision_source" => self.supervision_source.to_string(),
            "patch" => self.patch.to_string(),
            "hidden" => self.hidden.to_string(),
            "feat_dim" => self.feat_dim.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    /// Serializes every key as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.r == 0 {
            return Err(Error::Config("window radius r must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need lr > 0 and momentum in [0, 1)".into()));
        }
        self.kernel_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            sigma3: self.sigma3,
        }
    }

    pub fn kernel_terms(&self) -> KernelTerms {
        KernelTerms {
            color: self.rgb_in_kernel,
            feature: self.feature_in_kernel,
        }
    }

    pub fn model_dims(&self, classes: usize) -> ModelDims {
        ModelDims {
            patch: self.patch,
            hidden: self.hidden,
            classes,
            feat_dim: self.feat_dim,
        }
    }

    /// Whether the feature head receives any training signal.
    pub fn feature_head_active(&self) -> bool {
        self.lambda2 > 0.0 && (self.enable_fd || self.enable_fr)
    }
}

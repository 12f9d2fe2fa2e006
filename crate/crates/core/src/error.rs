use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid shape {h}x{w}: both sides must be at least 1")]
    InvalidShape { h: usize, w: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("no annotated pixels: partial cross-entropy needs at least one scribble")]
    NoAnnotations,

    #[error("non-finite {term} loss at iteration {iteration} (scene {scene}): {detail}")]
    NonFinite {
        term: &'static str,
        iteration: usize,
        scene: String,
        detail: String,
    },

    #[error("forward cache is stale: computed with parameter version {cache}, current version {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("could not place shape {index} after {retries} attempts")]
    Placement { index: usize, retries: usize },

    #[error("instance too large for brute-force oracle: {h}x{w} exceeds {limit}x{limit}")]
    SizeGuard { h: usize, w: usize, limit: usize },

    #[error("non-finite probe at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

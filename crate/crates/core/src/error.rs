use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("no route between nodes {from} and {to}")]
    Unreachable { from: usize, to: usize },

    #[error("infeasible tower packing: placed {placed} of {requested} after {attempts} attempts")]
    InfeasiblePacking {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("point ({x:.1}, {y:.1}) lies outside the viewport")]
    OutsideViewport { x: f64, y: f64 },

    #[error("marker absent")]
    MarkerAbsent,

    #[error("ambiguous marker: {regions} regions with area >= half of the largest")]
    AmbiguousMarker { regions: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate density: {0}")]
    DegenerateDensity(&'static str),

    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(&'static str),

    #[error("timestamps must be strictly increasing (index {0})")]
    NonIncreasingTime(usize),

    #[error("all points unmatched")]
    AllUnmatched,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing dependency stage `{0}`")]
    MissingStage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

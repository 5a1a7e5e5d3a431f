use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss has no recorded history on the tape")]
    NoTape,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("fuzz budget exhausted for {template} after {attempts} attempts ({violations} violations, {successes} successes banked)")]
    FuzzBudgetExhausted {
        template: String,
        attempts: usize,
        violations: usize,
        successes: usize,
    },

    #[error("banked scenario {0} did not reproduce its recorded outcome")]
    Irreproducible(String),

    #[error("no positive samples available for threshold calibration")]
    NoPositives,

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("replay buffer holds {have} transitions, {need} required")]
    BufferUnderflow { have: usize, need: usize },

    #[error("anomaly detector has not been trained")]
    DetectorUntrained,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

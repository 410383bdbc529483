use thiserror::Error;

/// Errors surfaced by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported {kind} version `{found}` (expected `{expected}`)")]
    Version {
        kind: &'static str,
        found: String,
        expected: String,
    },

    #[error("non-finite gradient in parameter `{0}`, update refused")]
    NonFiniteGradient(&'static str),

    #[error("person buffer columns not initialized: {0:?}")]
    Uninitialized(Vec<usize>),

    #[error("no cross-camera candidates: {0}")]
    NoCrossCamera(String),

    #[error("soft-label row {0} is degenerate")]
    DegenerateRow(usize),

    #[error("no affinity row has a cross-camera true match")]
    NoTrueMatches,

    #[error("all {0} queries skipped, none has an eligible true match")]
    AllQueriesSkipped(usize),

    #[error("training aborted at epoch {epoch}, iteration {iteration}: {msg}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("only {found} objects within {radius} m of the target, need {needed}")]
    TooFewHintObjects {
        radius: f64,
        found: usize,
        needed: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("k = {k} exceeds index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("query {0} has no positive submap")]
    NoPositives(u32),
    #[error("{stage} diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

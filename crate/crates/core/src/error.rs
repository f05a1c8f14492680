use std::path::PathBuf;

use thiserror::Error;

use crate::iterative::BestRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("device unavailable: {0}")]
    DeviceUnavailable(String),
    #[error("could not resolve an input shape for `{0}`")]
    UnresolvableShape(String),
    #[error("LLM response violates schema after {attempts} attempt(s): {detail}")]
    SchemaViolation { attempts: u32, detail: String },
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("LLM request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("no JSON object found in text")]
    NoJsonFound,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward pass rejected input: {0}")]
    ForwardShapeError(String),
    #[error("corrupt profiling report: {0}")]
    CorruptReport(String),
    #[error("compression plan is empty after validation")]
    EmptyPlan,
    #[error("dependency trace failed: {0}")]
    TraceFailure(String),
    #[error("pruned model no longer runs: {0}")]
    BrokenForward(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("no eligible layers: {0}")]
    NoEligibleLayers(String),
    #[error("dataset unavailable: {0}")]
    DatasetUnavailable(String),
    #[error("input incompatible with model: {0}")]
    IncompatibleInput(String),
    #[error("evaluation runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("all {iterations} iterations failed; best stays at the baseline")]
    AllIterationsFailed { iterations: usize, baseline: Box<BestRecord> },
    #[error("stage `{stage}` failed: {reason}")]
    StageFailure { stage: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("invalid pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] profagent_nn::NnError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

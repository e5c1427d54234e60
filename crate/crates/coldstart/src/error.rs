//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform; `detail` names the offending dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A probability left (0, 1); usually means a sigmoid is missing upstream.
    #[error("score {value} outside (0,1) at row {row}, task {task}")]
    ScoreDomain { value: f64, row: usize, task: usize },

    #[error("mixup requires a batch of at least 2 rows (got {0}); disable mixup for this batch")]
    MixupBatchTooSmall(usize),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error in field `{field}`: {msg}")]
    Schema { field: String, msg: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("degenerate labels: no {class} examples")]
    DegenerateLabels { class: &'static str },

    #[error("unknown feature group `{0}`")]
    UnknownGroup(String),

    #[error("unknown technique `{0}` (expected residual, scorereg, mixup, dropout)")]
    UnknownTechnique(String),

    #[error("empty query group list")]
    EmptyGroupList,

    #[error("missing run output: {0}")]
    MissingRun(String),

    #[error("run {run} failed: {source}")]
    RunFailed {
        run: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Runtime(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class for the CLI: 1 = user error, 2 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::Schema { .. }
            | Error::Parse { .. }
            | Error::UnknownGroup(_)
            | Error::UnknownTechnique(_)
            | Error::Generation(_) => 1,
            Error::RunFailed { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

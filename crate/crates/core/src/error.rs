use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data file failed to parse; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A model fit was requested with zero selected features.
    #[error("no features selected")]
    EmptyMask,

    /// Every sampled user has an empty test set; nDCG is undefined.
    #[error("no evaluable users")]
    NoEvaluableUsers,

    /// Leave-one-out analysis needs at least two features.
    #[error("degenerate feature set: {0} feature(s), need at least 2")]
    DegenerateFeatureSet(usize),

    #[error("exhaustive solve supports at most {limit} variables, got {m}")]
    TooManyVariables { m: usize, limit: usize },

    #[error("config: {0}")]
    Config(String),

    /// Pipeline error tagged with the stage that produced it.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

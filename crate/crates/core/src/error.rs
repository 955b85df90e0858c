use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cosine similarity is undefined at the zero vector")]
    ZeroVector,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid region spec: {0}")]
    InvalidSpec(String),

    #[error("columns {0} and {1} are identical")]
    DuplicateColumns(usize, usize),

    #[error("Gram matrix is singular (|det| = {det:e})")]
    SingularGram { det: f64 },

    #[error("codes of representatives {0} and {1} collide; re-select the representatives")]
    CodeCollision(usize, usize),

    #[error("patch condition violated: regions {i} and {j} agree on shared coordinates {shared:?}")]
    PatchCondition { i: usize, j: usize, shared: Vec<usize> },

    #[error(
        "Lipschitz bound {bound} violated by samples {i} and {j}: \
         conditional distance {conditional_distance}, input distance {input_distance}"
    )]
    LipschitzViolation {
        bound: f64,
        i: usize,
        j: usize,
        conditional_distance: f64,
        input_distance: f64,
    },

    #[error("non-finite gradient at epoch {epoch}, step {step} (parameter {parameter})")]
    NonFiniteGradient {
        epoch: usize,
        step: usize,
        parameter: &'static str,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

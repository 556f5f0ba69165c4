use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on mode {mode}: expected {expected}, found {found}")]
    DimensionMismatch {
        mode: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("document too short for order {order} (leaf {leaf}, {words} words)")]
    DocumentTooShort {
        leaf: usize,
        order: usize,
        words: u64,
    },

    #[error("node {0} does not exist")]
    MissingNode(usize),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("rank deficient: needed {needed} positive eigenvalues, found {found}")]
    RankDeficient { needed: usize, found: usize },

    #[error("no noise subspace: dimension {dim} must exceed the number of components {k}")]
    NoNoiseSubspace { dim: usize, k: usize },

    #[error("no latent features")]
    NoLatentFeatures,

    #[error("eigenvalue {0} lies outside the fourth-order branch range [-2, -1)")]
    OutOfBranch(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown solver `{0}`")]
    UnknownSolver(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by malformed input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::RankDeficient { .. }
                | Error::NoLatentFeatures
                | Error::Numerical(_)
                | Error::OutOfBranch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by the modeling and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "dimension mismatch: expected {expected}, got {got}{}",
        context_suffix(context)
    )]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficiently excited/unregularized coordinate {index}: Cholesky diagonal {diag:.3e} below tolerance")]
    SingularCoordinate { index: usize, diag: f64 },

    #[error("singular normal matrix: {0}")]
    SingularSystem(String),

    #[error("rank-deficient system: rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("optimization failed: {0}")]
    Optimization(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

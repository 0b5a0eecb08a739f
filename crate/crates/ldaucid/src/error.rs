//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension disagreement between tensors or layers.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument outside its documented range.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A covariance matrix failed its Cholesky factorization; the mixture
    /// needs (more) regularization.
    #[error("cholesky failed for component {component}: covariance is not positive definite")]
    Cholesky { component: usize },

    /// Confidence filtering rejected every candidate sample.
    #[error("pseudo-set empty after {attempts} draws at tau={tau}; lower tau or train the classifier further")]
    PseudoSetEmpty { attempts: usize, tau: f64 },

    /// Malformed input file (IDX data, checkpoint).
    #[error("parse error in {path} at offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An error from a lower layer, annotated with run context.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with a human-readable context string (run id, phase).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

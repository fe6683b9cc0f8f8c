use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library. The CLI maps each variant onto an
/// exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: record {record}: {message}")]
    Corpus {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid watermark: {0}")]
    Watermark(String),

    #[error("missing table entry: {0}")]
    MissingEntry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: L_E={loss_e}, L_D={loss_d}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss_e: f64,
        loss_d: f64,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::checkpoint::CheckpointError;
use crate::data::idx::IdxError;
use crate::data::metrics::MetricsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0} requires non-empty input")]
    Empty(&'static str),

    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite loss {value} at batch {batch}{}", fmt_component(.component))]
    NonFinite {
        value: f64,
        batch: usize,
        component: Option<usize>,
    },

    #[error("base model has not been pre-trained")]
    NotPretrained,

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_component(component: &Option<usize>) -> String {
    match component {
        Some(c) => format!(" (component {c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the batch index and mixture component to a non-finite loss
    /// error; other variants pass through untouched.
    pub fn with_training_context(self, batch: usize, component: Option<usize>) -> Self {
        match self {
            Error::NonFinite { value, .. } => Error::NonFinite {
                value,
                batch,
                component,
            },
            other => other,
        }
    }

    /// True for failures caused by the numerics rather than by I/O or usage.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

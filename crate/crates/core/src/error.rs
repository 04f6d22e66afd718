use std::path::PathBuf;

use thiserror::Error;
use vas_numnet::NetError;

pub type Result<T> = std::result::Result<T, VasError>;

#[derive(Debug, Error)]
pub enum VasError {
    #[error("invalid budget {k} for a task with {n_cells} cells")]
    InvalidBudget { k: usize, n_cells: usize },

    #[error("cell {cell} is outside a grid of {n_cells} cells")]
    InvalidCell { cell: usize, n_cells: usize },

    #[error("cell {0} has already been queried")]
    RequeriedCell(usize),

    #[error("search budget exhausted")]
    BudgetExhausted,

    #[error("inconsistent counts: {0}")]
    InconsistentCount(String),

    #[error("no unqueried cell is left to choose")]
    NoAction,

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid generation config: {0}")]
    GenerationConfig(String),

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Net(#[from] NetError),
}

impl VasError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> VasError {
        let path = path.into();
        move |source| VasError::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        VasError::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    /// True for numerical failures (non-finite gradients) that abort training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, VasError::Net(NetError::Numeric { .. }))
    }

    /// True for malformed data files and checkpoints.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            VasError::Format { .. }
                | VasError::Io { .. }
                | VasError::InvalidTask(_)
                | VasError::Net(NetError::Format { .. } | NetError::Io { .. })
        )
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("equilibrium solve failed: {0}")]
    Equilibrium(String),

    #[error("singular Jacobian: {0}")]
    Singular(String),

    #[error("matrix is not reliably diagonalizable: {0}")]
    NotDiagonalizable(String),

    #[error("empty mode selection: {0}")]
    EmptySelection(String),

    #[error("infeasible batch plan: {0}")]
    InfeasiblePlan(String),

    /// A method or tensor materialization would exceed the configured
    /// memory limit. Maps to the `memory-fail` status in reports.
    #[error("memory limit exceeded: {0}")]
    MemoryLimit(String),

    #[error("shard set does not cover the index space: {0}")]
    Coverage(String),

    /// Internal invariant violation: the streaming pipeline outgrew its
    /// workspace budget. A bug in the scheduler, not a user error.
    #[error("workspace budget exceeded: {0}")]
    WorkspaceBudget(String),

    #[error("shard file format: {0}")]
    ShardFormat(String),

    #[error("deadline exceeded")]
    Timeout,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by a memory limit rather than bad input.
    pub fn is_memory_fail(&self) -> bool {
        matches!(self, Error::MemoryLimit(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

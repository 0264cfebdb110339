use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A forward pass produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Every instance in a batch had an unreachable target.
    #[error("all {0} instances in the batch are infeasible")]
    AllInfeasible(usize),
    /// Training diverged.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    /// Invalid configuration; names the offending key.
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

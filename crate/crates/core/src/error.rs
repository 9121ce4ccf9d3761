//! Shared error type for the whole library.

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-facing contract was violated (bad argument range, wrong rank,
    /// non-scalar backward root, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input is degenerate for the operation (e.g. softmax over all -inf).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A non-finite value reached a context that requires finite data.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced NaN/inf state; reported with the offending site.
    #[error("training diverged at layer {layer}, step {step}")]
    Divergence { layer: usize, step: usize },

    /// A configured size cap was exceeded.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

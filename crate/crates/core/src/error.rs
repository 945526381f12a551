use alloc::string::String;

/// Errors raised by the tensor engine and every model component built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value outside the mathematical domain of an operation (e.g. log of 0).
    #[error("domain error: {0}")]
    Domain(String),
    /// NaN or infinity produced by a forward operation.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data that violates a documented contract (one-hot maps, latent ranges, masks).
    #[error("validation error: {0}")]
    Validation(String),
    /// Malformed serialized bytes or config text.
    #[error("format error: {0}")]
    Format(String),
    /// A checkpoint written under a different model configuration.
    #[error("checkpoint config hash {found:016x} does not match {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    /// A training objective component became non-finite.
    #[error("training aborted: loss component `{component}` is not finite")]
    NonFiniteLoss { component: &'static str },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;

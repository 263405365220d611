use std::io;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot form a mismatched pair: {0}")]
    CannotFormMismatch(String),

    #[error("training diverged at step {step}: non-finite {component}")]
    TrainingDiverged { component: String, step: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid_arg;

macro_rules! ensure_arg {
    ($cond:expr, $($arg:tt)*) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err($crate::error::invalid_arg!($($arg)*));
            }
        }
    };
}
pub(crate) use ensure_arg;

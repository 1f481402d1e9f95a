use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("orbit did not return to Y within {0} steps")]
    Trapped(u64),
    #[error("return-time truncation: {0}")]
    Truncation(String),
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),
    #[error("observable support violation: {0}")]
    SupportViolation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;

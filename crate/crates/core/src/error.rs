use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// `Config` covers inputs that a user controls through configuration (grid
/// steps, schedules, shapes). `Contract` covers caller bugs such as mismatched
/// lengths or non-normalized rows handed to a loss.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use contract_err;

use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants mirror how failures surface to callers: `Shape` and `Param`
/// are caller mistakes (bad dims, bad hyperparameter), `Numeric` is a runtime
/// failure such as a NaN loss, `Format` covers malformed tensor files, and
/// `Config`/`Data` cover run configuration and dataset layout problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code a command-line front end should use for this error:
    /// 2 for usage/config mistakes, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Param(_) => 2,
            _ => 1,
        }
    }
}

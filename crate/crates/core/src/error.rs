use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene layout: {0}")]
    InvalidLayout(String),

    #[error("invalid calibration target: {0}")]
    InvalidTarget(String),

    #[error("impossible observation: {count} photons at pixel {pixel}, bin {bin} where the intensity is zero")]
    ImpossibleObservation { pixel: usize, bin: usize, count: u32 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("uncertainty undefined: {0}")]
    UncertaintyUndefined(String),

    #[error("empty selection: {0}")]
    Empty(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Format(_) => 4,
            Error::NonFinite(_)
            | Error::ImpossibleObservation { .. }
            | Error::UncertaintyUndefined(_)
            | Error::Empty(_) => 5,
            Error::Shape(_)
            | Error::Config(_)
            | Error::InvalidLayout(_)
            | Error::InvalidTarget(_) => 2,
        }
    }
}

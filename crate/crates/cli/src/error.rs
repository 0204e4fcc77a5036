use postsel_core::error::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration; the message names the field.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(field: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{field}: {msg}"))
    }

    /// 2 for configuration problems, 3 for numerical failures, 4 for an empty
    /// conditioning cell, 1 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) | CoreError::InvalidDesign(_) | CoreError::Parse(_) => 2,
                CoreError::EmptyCell(_) => 4,
                CoreError::Io(_) | CoreError::Csv(_) => 1,
                CoreError::Singular(_)
                | CoreError::DegenerateResidual
                | CoreError::Tolerance { .. }
                | CoreError::NegligibleConditioning(_)
                | CoreError::ZeroAccepted => 3,
            },
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

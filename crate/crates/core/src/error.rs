use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("residual sum of squares is zero")]
    DegenerateResidual,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tolerance not met (best estimate {best}, error estimate {err})")]
    Tolerance { best: f64, err: f64 },
    #[error("conditioning event has probability {0:e}, below the numerical floor")]
    NegligibleConditioning(f64),
    #[error("empty conditioning cell (no replication selected {0})")]
    EmptyCell(String),
    #[error("no replication was accepted by the rejection sampler")]
    ZeroAccepted,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SmotError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmotError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("maturity {maturity} is not on the time grid (h = {step})")]
    MaturityOffGrid { maturity: f64, step: f64 },

    #[error("transition band of row {row} at timestep {timestep} contains no destination point")]
    EmptyBand { timestep: usize, row: usize },

    #[error("non-finite message at timestep {timestep}")]
    NonFiniteMessage { timestep: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("Newton solve did not converge at timestep {timestep} after {iterations} iterations (gradient {gradient:e})")]
    NewtonDiverged {
        timestep: usize,
        iterations: usize,
        gradient: f64,
    },

    #[error("option price {price} outside the no-arbitrage interval ({lower}, {upper})")]
    PriceOutOfBounds { price: f64, lower: f64, upper: f64 },

    #[error("dense path tensor would hold {entries} entries (limit {limit})")]
    TooLarge { entries: usize, limit: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

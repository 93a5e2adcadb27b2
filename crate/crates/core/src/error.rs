use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Kronecker/moment order {0}; expected 1, 2 or 3")]
    InvalidOrder(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model is not subcritical (spectral radius {rho})")]
    NotSubcritical { rho: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("immigration mean is zero; the stationary distribution is degenerate")]
    ZeroImmigration,

    #[error("third-order moment blocks were not built")]
    MissingThirdMoments,

    #[error("state count overflowed 64 bits (supercritical runaway?)")]
    Overflow,

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

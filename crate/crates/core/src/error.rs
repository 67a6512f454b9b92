use thiserror::Error;

#[derive(Debug, Error)]
pub enum GspsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("need at least 2 locations, got {0}")]
    TooFewLocations(usize),

    #[error("locations {0} and {1} coincide")]
    DuplicateLocation(usize, usize),

    #[error("theta[{index}] = {value} lies outside [{lower}, {upper}]")]
    ThetaOutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("derivative index {index} out of range for {q} parameters")]
    IndexOutOfRange { index: usize, q: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<GspsError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GspsError {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            GspsError::NotPositiveDefinite(_) | GspsError::NonFinite(_) => true,
            GspsError::Block { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, GspsError>;

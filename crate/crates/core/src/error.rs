use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cell index {index} out of range for {occasions} capture occasions")]
    CellOutOfRange { index: usize, occasions: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("the extended model needs the always-observed binary covariate")]
    MissingAlwaysObserved,

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("Lagrange multiplier is infeasible: 1 + lambda'U <= 0 at row {row}")]
    InfeasibleMultiplier { row: usize },

    #[error("no completely observed individuals; capture coefficients are not identifiable")]
    NoCompleteCases,

    #[error("{complete} complete cases cannot identify {dim} coefficients")]
    TooFewCompleteCases { complete: usize, dim: usize },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("csv error at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    CsvParse(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Problems with the input data rather than with the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidData(_)
                | Error::MissingAlwaysObserved
                | Error::NoCompleteCases
                | Error::TooFewCompleteCases { .. }
                | Error::Csv { .. }
                | Error::CsvParse(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::DimensionMismatch { .. }
        )
    }
}

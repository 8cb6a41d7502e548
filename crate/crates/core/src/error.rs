use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every component density of observation `row` underflowed to zero.
    #[error("degenerate likelihood at observation {row}")]
    DegenerateLikelihood { row: usize },

    #[error("component {index} of G lost all responsibility")]
    DegenerateComponent { index: usize },

    #[error("inner optimizer failed: {0}")]
    OptimizerFailure(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Input errors map to exit code 2, everything else to 1.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Parse { .. }
                | Error::MissingColumn(_)
                | Error::Csv(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateLikelihood { .. } => "degenerate_likelihood",
            Error::DegenerateComponent { .. } => "degenerate_component",
            Error::OptimizerFailure(_) => "optimizer_failure",
            Error::Parse { .. } => "parse",
            Error::MissingColumn(_) => "missing_column",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

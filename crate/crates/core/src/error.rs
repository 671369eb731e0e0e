use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel or distribution parameter is outside its domain.
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    /// A Cholesky factorization failed, even after the jitter ladder.
    #[error("numerical rank failure in {context}: {detail}")]
    NumericalRank { context: String, detail: String },

    /// Normal equations of an augmented system are singular.
    #[error("parameters not identifiable: {0}")]
    Identifiability(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("division by zero: {0}")]
    DivisionDomain(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn rank(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericalRank { context: context.into(), detail: detail.into() }
    }

    /// Short machine-readable tag used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ParameterDomain(_) => "parameter_domain",
            Error::NumericalRank { .. } => "numerical_rank",
            Error::Identifiability(_) => "identifiability",
            Error::Configuration(_) => "configuration",
            Error::InvalidInput(_) => "invalid_input",
            Error::Dimension(_) => "dimension",
            Error::EmptyData(_) => "empty_data",
            Error::Data { .. } => "data",
            Error::DivisionDomain(_) => "division_domain",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Serialization(_) => "serialization",
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("duplicate (unit, wave) pair ({unit}, {wave}) at row {row}")]
    DuplicateUnitWave { unit: String, wave: i64, row: usize },

    #[error("non-numeric value {value:?} in column `{column}` at row {row}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("budget share {value} outside [0, 1] in column `{column}` at row {row}")]
    ShareOutOfRange { row: usize, column: String, value: f64 },

    #[error("unknown variable role `{0}`")]
    UnknownRole(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("household must have at least one adult")]
    NoAdult,

    #[error("no unit is observed in every wave")]
    EmptyResult,

    #[error("age {age} of unit {unit} falls in no age band")]
    UncoveredAge { unit: String, age: i64 },

    #[error("education label {label:?} of unit {unit} matches no education level")]
    UnknownEducation { unit: String, label: String },

    #[error("cell {key} has no members in wave {wave}")]
    EmptyCell { key: String, wave: i64 },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("not enough observations: {n} rows for {k} coefficients")]
    InsufficientObservations { n: usize, k: usize },

    #[error("weight {value} at row {row} is not strictly positive")]
    NonPositiveWeight { row: usize, value: f64 },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("cross-equation residual covariance is singular")]
    SingularSigma,

    #[error("not identified: {0}")]
    NotIdentified(String),

    #[error("panel is not balanced: {0}")]
    Unbalanced(String),

    #[error("{0}")]
    NotApplicable(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("variance matrix of the coefficient difference is singular")]
    SingularV,

    #[error("price {value} of good `{good}` is not strictly positive")]
    NonPositivePrice { good: String, value: f64 },

    #[error("outer e(p) iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("budget share at the evaluation point is zero")]
    ZeroShare,

    #[error("direct price elasticity is zero")]
    ZeroPriceElasticity,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input
    /// or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::NotPositiveDefinite
                | Error::SingularSigma
                | Error::SingularV
                | Error::NotIdentified(_)
                | Error::NoConvergence { .. }
                | Error::InsufficientObservations { .. }
                | Error::ZeroShare
                | Error::ZeroPriceElasticity
        )
    }
}

use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("no contract in the roll calendar covers {0}")]
    CalendarGap(NaiveDate),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at {date}, column {column}")]
    NonFinite { date: NaiveDate, column: String },

    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("variance targeting infeasible: {0}")]
    TargetingInfeasible(String),

    #[error("inadmissible risk premia: kappa*_{factor} = {kappa_star:e} <= 0")]
    InadmissiblePremia { factor: usize, kappa_star: f64 },

    #[error("characteristic function overflow at z = {re} + {im}i")]
    CfOverflow { re: f64, im: f64 },

    #[error("Fourier inversion did not converge: {0}")]
    NotConverged(String),

    #[error("option price {price} violates the {bound} no-arbitrage bound {value}")]
    BoundViolation {
        bound: &'static str,
        price: f64,
        value: f64,
    },

    #[error("only {survived} of {requested} simulation replicas succeeded")]
    TooFewReplicas { survived: usize, requested: usize },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage}: missing dependency {path}")]
    MissingDependency { stage: String, path: PathBuf },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

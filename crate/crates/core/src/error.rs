use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate dataset: all {n} observations have A = {arm}")]
    SingleArm { n: usize, arm: u8 },

    #[error("design matrix is rank deficient: column {column} ({name}) is linearly dependent on earlier columns")]
    RankDeficient { column: usize, name: String },

    #[error("outcome has zero range (all values equal {0})")]
    ConstantOutcome(f64),

    #[error("arm {arm} has no weight in the fluctuation")]
    EmptyArm { arm: u8 },

    #[error("too few retained bootstrap draws: {retained} < {required}")]
    TooFewDraws { retained: usize, required: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("duplicate observation in study {study_id}: {measure_a} / {measure_b}")]
    DuplicateObservation {
        study_id: String,
        measure_a: String,
        measure_b: String,
    },

    #[error("unmapped measures: {}", format_list(.0))]
    UnmappedMeasures(Vec<String>),

    #[error("unknown canonical variable `{0}`")]
    UnknownVariable(String),

    #[error("composite: {0}")]
    Composite(String),

    #[error("missing inter-correlation in study {study_id}: {measure_a} / {measure_b}")]
    MissingInterCorrelation {
        study_id: String,
        measure_a: String,
        measure_b: String,
    },

    #[error("no pooled estimate for pairs: {}", format_list(.0))]
    MissingPairs(Vec<String>),

    #[error("pooled matrix is not positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("model spec: {0}")]
    Spec(String),

    #[error("model is not recursive: cycle through {}", .0.join(" -> "))]
    CyclicModel(Vec<String>),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error(
        "optimizer did not converge after {iterations} iterations \
         (F = {f_best:.6e}, max |gradient| = {grad_norm:.3e})"
    )]
    NotConverged {
        iterations: usize,
        f_best: f64,
        grad_norm: f64,
        best: Vec<f64>,
    },

    #[error("sample size {n} too small for {p} variables (need at least {})", .p + 2)]
    SampleTooSmall { n: f64, p: usize },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

fn format_list(items: &[String]) -> String {
    items.join(", ")
}

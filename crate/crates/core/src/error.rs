use thiserror::Error;

use crate::matcore::Matrix;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e} < -{tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid incompatibility: {0}")]
    GridIncompatible(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("Riccati structure error: {0}")]
    CareStructure(String),

    #[error("Riccati subspace error: {0}")]
    CareSubspace(String),

    #[error("Riccati equation is degenerate: {0}")]
    CareDegenerate(String),

    #[error("no positive definite Riccati solution: {reason}")]
    NoPdSolution {
        reason: String,
        b: Box<Matrix>,
        c: Box<Matrix>,
        d: Box<Matrix>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty report: {0}")]
    EmptyReport(String),

    #[error("all {replications} replications failed: {reasons}")]
    AllReplicationsFailed { replications: usize, reasons: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Ordering(_) | Error::Parse(_) => 2,
            Error::Synthesis(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 5,
            _ => 4,
        }
    }

    /// Short machine-readable category, used in failure tables.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::NotPsd { .. } => "not_psd",
            Error::Singular(_) => "singular",
            Error::Synthesis(_) => "synthesis",
            Error::Config(_) => "config",
            Error::GridIncompatible(_) => "grid_incompatible",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Degenerate(_) => "degenerate",
            Error::CareStructure(_) => "care_structure",
            Error::CareSubspace(_) => "care_subspace",
            Error::CareDegenerate(_) => "care_degenerate",
            Error::NoPdSolution { .. } => "no_pd_solution",
            Error::Schema(_) => "schema",
            Error::Ordering(_) => "ordering",
            Error::Parse(_) => "parse",
            Error::EmptyReport(_) => "empty_report",
            Error::AllReplicationsFailed { .. } => "all_failed",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

use thiserror::Error;

/// Every failure the library reports. Numerical breakdowns carry enough
/// context to tell which block or iteration went wrong.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("invalid k-point set: {0}")]
    InvalidKpoints(String),
    #[error("basis at k = {k:?} is empty for e_cut = {e_cut}")]
    EmptyBasis { k: [f64; 3], e_cut: f64 },
    #[error("invalid smearing parameters: {0}")]
    InvalidSmearing(String),
    #[error("electron count {n_e} is outside (0, {max})")]
    InfeasibleOccupation { n_e: f64, max: f64 },
    #[error("no chemical potential found: {0}")]
    NoChemicalPotential(String),
    #[error("occupation derivatives vanish for every state; the chemical potential is not differentiable here")]
    FlatOccupation,
    #[error("Cholesky factorization failed in block {block}: {reason}")]
    CholeskyFailed { block: usize, reason: String },
    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("optimizer breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },
    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("unknown fixture '{0}'")]
    UnknownFixture(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error family: 2 for bad input, 3 for
    /// I/O, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownFixture(_)
            | Error::InvalidCell(_)
            | Error::InvalidKpoints(_)
            | Error::EmptyBasis { .. }
            | Error::InvalidSmearing(_)
            | Error::InfeasibleOccupation { .. }
            | Error::InvalidModel(_)
            | Error::Dimension(_) => 2,
            Error::Io { .. } | Error::Serialize(_) => 3,
            Error::NoChemicalPotential(_)
            | Error::FlatOccupation
            | Error::CholeskyFailed { .. }
            | Error::Eigensolver(_)
            | Error::Breakdown { .. } => 4,
        }
    }
}

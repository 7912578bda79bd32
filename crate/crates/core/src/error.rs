use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Schema(String),

    #[error("layer dimension chain violated: {0}")]
    DimensionChain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "cost depends on the network input directly; only costs on network outputs are supported"
    )]
    UnsupportedCost,

    #[error("input domain is empty: {0}")]
    InfeasibleDomain(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error(
        "no non-degenerate sample found after {tries} tries; neurons {stuck:?} stay at zero input \
         and zero output (the network may be losslessly reducible)"
    )]
    DegenerateNetwork { tries: usize, stuck: Vec<usize> },

    #[error("relaxation failed: {0}")]
    RelaxationFailed(String),

    #[error("KKT system of the relaxation is infeasible at the given primal point: {0}")]
    StationarityViolation(String),

    #[error("penalty fine-tuning exhausted its schedule ({} candidates tried)", log.len())]
    FineTuneFailed {
        log: Vec<crate::penalty::FineTuneEntry>,
    },

    #[error("DCA subproblem failed at iteration {iteration}: {status}")]
    Subproblem { iteration: usize, status: String },

    #[error("{hidden} hidden neurons exceeds enumeration cap {cap}")]
    SizeCap { hidden: usize, cap: usize },

    #[error("numerical failure in convex solver: {0}")]
    Numerical(String),

    #[error("only {feasible} of {attempted} sampled demands were feasible (< 50%)")]
    DataGeneration { feasible: usize, attempted: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// The underlying error with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::Shape {
                what,
                expected,
                found,
            })
        }
    }
}

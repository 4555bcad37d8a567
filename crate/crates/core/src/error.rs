use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("site {site} out of range for a lattice of {n} sites")]
    InvalidSite { site: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidSpec(String),

    /// Brute-force bond weight would exceed the configured budget.
    #[error("bond weight enumeration needs {needed} local configurations, budget is {budget}")]
    CostGuard { needed: u128, budget: u128 },

    /// A cluster closure is too large to enumerate; the caller must raise K.
    #[error(
        "cluster {cluster} (size {size}, closure size {closure_size}) needs {needed} configurations, \
         enumeration cap is {cap}; raise K"
    )]
    EnumerationCap {
        cluster: usize,
        size: usize,
        closure_size: usize,
        needed: u128,
        cap: u128,
    },

    #[error("no Lyapunov table for cluster {0}")]
    MissingTable(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Refusals are well-formed requests the engine declines to run
    /// (enumeration too large), as opposed to usage errors.
    pub fn is_refusal(&self) -> bool {
        match self {
            Error::CostGuard { .. } | Error::EnumerationCap { .. } => true,
            Error::Replicate { source, .. } => source.is_refusal(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mode {mode} has a nonzero constant term (does not fix the origin)")]
    NonzeroConstantTerm { mode: usize },

    #[error("polynomial has odd degree {0}; sum-of-squares tests need even degree")]
    OddDegree(i32),

    #[error("polynomial matrix is not symmetric")]
    NotSymmetric,

    #[error("semidefinite program is ill-conditioned (tau and kappa both vanished)")]
    IllConditioned,

    #[error("multiplier degree cap {cap} cannot balance the certificate summands")]
    DegreeCapTooSmall { cap: u32 },

    #[error("linearization could not be certified stable up to degree {max_degree}")]
    LinearizationNotCertifiedStable { max_degree: u32 },

    #[error("no feasible beta found down to {floor:e}")]
    NoFeasibleBeta { floor: f64 },

    #[error("all {count} assignments are infeasible at this degree")]
    EnumerationExhausted { count: usize },

    #[error("enumeration of {count} assignments exceeds the cap of {cap}")]
    EnumerationTooLarge { count: usize, cap: usize },

    #[error("certificate verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

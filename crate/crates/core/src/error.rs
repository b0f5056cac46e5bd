use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("coincident bases: minimal separation {separation:.3e} below tolerance")]
    Singular { separation: f64 },
    #[error("insufficient samples: need more than {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("degenerate leading coefficient: |gamma_K| / |gamma|_inf = {ratio:.3e}")]
    DegenerateLeadingCoefficient { ratio: f64 },
    #[error("ill-conditioned system: estimated condition number {condition:.3e}")]
    IllConditioned { condition: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("eigenspace {index} is blocked by the sampling vector (|psi| = {magnitude:.3e})")]
    BlockedEigenspace { index: usize, magnitude: f64 },
    #[error("pairing failed: assignment distance {distance:.3e} exceeds tolerance {tolerance:.3e}")]
    PairingFailure { distance: f64, tolerance: f64 },
    #[error("unreliable kernel: singular value gap {gap:.3} below 2")]
    UnreliableKernel { gap: f64 },
    #[error("winding direction could not be resolved: {0}")]
    WindingResolution(String),
    #[error("peeling failed: {0}")]
    Peeling(String),
    #[error("phase propagation failed: {0}")]
    PhasePropagation(String),
    #[error("inconsistent product table: {0}")]
    InconsistentTable(String),
    #[error("instance generation exhausted {attempts} attempts for {kind}")]
    Generation { kind: String, attempts: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

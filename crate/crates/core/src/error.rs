use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    EigNoConvergence { iterations: usize, residual: f64 },

    #[error("tensor numerically zero")]
    TensorNumericallyZero,

    #[error("rank-deficient second moment: eigenvalue {index} is {value:e}")]
    RankDeficient { index: usize, value: f64 },

    #[error(
        "exhaustive alignment refused for {0} columns; use align_columns_assignment instead"
    )]
    AlignmentTooLarge(usize),

    #[error("no unique optimal action for user")]
    NoUniqueOptimum,

    #[error("no critical radius (tied optimum)")]
    TiedOptimum,

    #[error("outside robustness regime: {0}")]
    OutsideRobustRegime(String),

    #[error("exact alpha enumeration capped at C <= {cap} (got C = {c}); use alpha_sampled for a lower bound")]
    AlphaCapExceeded { c: usize, cap: usize },

    #[error("uninitialized design: every arm must be played once before unregularized selection")]
    UninitializedDesign,

    #[error("infeasible mixture floor: v_min = {v_min} must be below 1/C = {bound}")]
    InfeasibleFloor { v_min: f64, bound: f64 },

    #[error("action {action} out of range for {arms} arms (session {session}, step {step})")]
    ActionOutOfRange {
        action: usize,
        arms: usize,
        session: u64,
        step: u32,
    },

    #[error("HexagonAware schedule requires a hexagon threshold value")]
    MissingHexagon,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

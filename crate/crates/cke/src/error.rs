use thiserror::Error;

/// Errors raised by the geometry, calculus, and solver layers.
///
/// Mathematical non-convergence (`Diverged`, `NoConvergence`, `NotKaehler`)
/// is a result, not a bug: callers are expected to report it.
#[derive(Debug, Error)]
pub enum CkeError {
    #[error("Minkowski sum of the factor polytopes does not reproduce the anticanonical polytope: {0}")]
    SumMismatch(String),

    #[error("factor polytope {0} has empty interior")]
    DegenerateFactor(usize),

    #[error("no closed-form reference metric for this decomposition: {0}")]
    NotAvailable(String),

    #[error("form is not positive definite at node {node} (component {component})")]
    NotPositive { component: usize, node: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("Poisson compatibility integral {0:.3e} exceeds tolerance")]
    NotSolvable(f64),

    #[error("linear solver diverged: {0}")]
    SolverDiverged(String),

    #[error("affine-trend fit leaves residual growth {0:.3e} at the grid shell")]
    Unbounded(f64),

    #[error("numerical kernel of the linearized operator has {found} directions, expected {expected}")]
    KernelExcess { found: usize, expected: usize },

    #[error("metric {component} leaves the Kähler cone at node {node} (t = {t})")]
    NotKaehler {
        component: usize,
        node: usize,
        t: f64,
    },

    #[error("Newton iteration diverged after {iterations} steps (residual {residual:.3e})")]
    Diverged { iterations: usize, residual: f64 },

    #[error("Ricci iteration did not converge after {0} steps")]
    NoConvergence(usize),

    #[error("deformation is not trace-free: |tr| = {0:.3e}")]
    NotTraceFree(f64),

    #[error("start is not a trivial scaling of a Kähler-Einstein metric")]
    NotTrivialStart,

    #[error("sum of class increments is nonzero; the deformation classes must sum to zero")]
    NotExact,

    #[error("not enough usable trace entries: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CkeError>;

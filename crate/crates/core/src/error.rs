use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// The parameters sit at or below the infection threshold where no
    /// positive solution exists.
    #[error("threshold not exceeded: {0}")]
    Threshold(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    Iteration { iterations: usize, residual: f64 },

    #[error("converged profile has negative value {value:.3e} (component {comp}, node {node})")]
    Positivity {
        comp: usize,
        node: usize,
        value: f64,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("domain continuation stopped at l = {l:.3} without convergence (relative change {change:.3e})")]
    Continuation { l: f64, change: f64 },

    #[error("time step {dt:.3e} violates the advection guard (courant number {courant:.3})")]
    StepSize { dt: f64, courant: f64 },

    #[error("boundary retreated: h' = {h_prime:.3e}")]
    BoundaryRetreat { h_prime: f64 },

    #[error("cumulative clipped mass {clipped:.3e} exceeds the allowed budget")]
    ClippingBudget { clipped: f64 },

    #[error("at t = {t:.6}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Domain(_) => "domain",
            Error::Threshold(_) => "threshold",
            Error::Precondition(_) => "precondition",
            Error::Iteration { .. } => "iteration",
            Error::Positivity { .. } => "positivity",
            Error::Consistency(_) => "consistency",
            Error::Continuation { .. } => "continuation",
            Error::StepSize { .. } => "step_size",
            Error::BoundaryRetreat { .. } => "boundary_retreat",
            Error::ClippingBudget { .. } => "clipping_budget",
            Error::AtTime { source, .. } => source.kind(),
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("gradient magnitude {max_grad:.3e} left the admissible ball of radius {limit:.3e}")]
    GradientOutOfRange { max_grad: f64, limit: f64 },
    #[error("datum amplitude {amplitude:.3e} exceeds the smallness threshold {threshold:.3e}")]
    DataTooLarge { amplitude: f64, threshold: f64 },
    #[error("fit is ill conditioned (condition number {cond:.3e} above cap {cap:.3e})")]
    IllConditionedFit { cond: f64, cap: f64 },
    #[error("xi must be nonzero")]
    ZeroXi,
    #[error("Faddeev symbol nearly vanishes on the lattice (min |p| = {min_symbol:.3e}, guard {guard:.3e})")]
    SymbolSingularity { min_symbol: f64, guard: f64 },
    #[error("oscillation budget exceeded: N*h = {nh:.3} > {limit:.3}")]
    OscillationBudgetExceeded { nh: f64, limit: f64 },
    #[error("layer equation did not converge after {iterations} iterations (residual {residual:.3e})")]
    LayerSolveNonConvergence { iterations: usize, residual: f64 },
    #[error("operator is singular or indefinite: {0}")]
    SingularOperator(String),
    #[error("verification failed: {0}")]
    VerificationMismatch(String),
    #[error("Richardson extrapolation unstable at xi index {index}")]
    ExtrapolationUnstable { index: usize },
    #[error("probe gradients are degenerate on {fraction:.4} of interior nodes")]
    DegenerateProbes { fraction: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed field dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of an iterative or direct solver to produce a solution.
    pub fn is_solver_failure(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_solver_failure();
        }
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::GradientOutOfRange { .. }
                | Error::LayerSolveNonConvergence { .. }
                | Error::SingularOperator(_)
        )
    }

    /// True for failed checks of a numerical invariant.
    pub fn is_invariant_failure(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_invariant_failure();
        }
        matches!(
            self,
            Error::VerificationMismatch(_)
                | Error::ExtrapolationUnstable { .. }
                | Error::IllConditionedFit { .. }
                | Error::DegenerateProbes { .. }
        )
    }
}

/// Tags errors with the pipeline stage that raised them.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("degenerate network: {0}")]
    DegenerateNetwork(String),

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:e})")]
    PowerFlow { iterations: usize, mismatch: f64 },

    #[error("trapezoidal corrector did not converge at t = {t} s (residual {residual:e})")]
    NonConvergence { t: f64, residual: f64 },

    #[error("simulation diverged at t = {t} s")]
    Divergence { t: f64 },

    #[error("adjoint diverged at step {index}")]
    AdjointDivergence { index: usize },

    #[error("step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("scenario {scenario}: {source}")]
    Scenario {
        scenario: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, index: usize) -> Self {
        Error::Step {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_scenario(self, scenario: usize) -> Self {
        Error::Scenario {
            scenario,
            source: Box::new(self),
        }
    }

    /// Innermost error once step and scenario annotations are stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } | Error::Scenario { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::DegenerateNetwork(_)
                | Error::PowerFlow { .. }
                | Error::NonConvergence { .. }
                | Error::Divergence { .. }
                | Error::AdjointDivergence { .. }
                | Error::TrainingFailure(_)
        )
    }

    /// Short machine-readable category used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Structural(_) => "structural",
            Error::DegenerateNetwork(_) => "degenerate_network",
            Error::PowerFlow { .. } => "power_flow",
            Error::NonConvergence { .. } => "nonconvergence",
            Error::Divergence { .. } => "divergence",
            Error::AdjointDivergence { .. } => "adjoint_divergence",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::TrainingFailure(_) => "training_failure",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Step { .. } | Error::Scenario { .. } => unreachable!(),
        }
    }
}

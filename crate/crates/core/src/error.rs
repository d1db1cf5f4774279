use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inputs whose shapes or indices violate an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conditional mode for individual {individual} did not converge after {iterations} Newton iterations")]
    ModeNotConverged {
        individual: usize,
        iterations: usize,
        last_iterate: Vec<f64>,
    },

    #[error("symmetric factorization failed: {0}")]
    Factorization(String),

    #[error("simulation overflow at individual {individual}, variable {variable}")]
    SimulationOverflow { individual: usize, variable: usize },

    #[error("quadrature supports latent dimension 1 or 2, got {0}")]
    UnsupportedDimension(usize),

    #[error("all importance weights vanish for individual {0}")]
    DegenerateWeights(usize),

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(&'static str),

    #[error("proposal adaptation failed: {0}")]
    Adaptation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient step {iteration} failed: every individual in the batch had degenerate weights")]
    StepFailed { iteration: usize },

    #[error("variational fit produced a non-finite ELBO at iteration {iteration}")]
    NonFiniteElbo { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

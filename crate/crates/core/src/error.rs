use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("budget violation: action {action} used {used} times, budget {budget}")]
    BudgetViolation {
        action: usize,
        used: usize,
        budget: usize,
    },

    #[error("unbalanced budgets: sum {sum} != {n_arms} arms")]
    UnbalancedBudgets { sum: usize, n_arms: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("solver returned {0:?}")]
    Solver(crate::simplex::LpStatus),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("timestep {timestep}: {source}")]
    PolicyViolation {
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        dump: Box<crate::textfmt::Document>,
    },

    #[error("reward gap undefined: oracle cumulative reward is zero at every timestep")]
    UndefinedGap,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot step from terminal state {0}")]
    TerminalStep(usize),

    #[error("support violation at state {state}, action {action}: {detail}")]
    SupportViolation {
        state: usize,
        action: usize,
        detail: &'static str,
    },

    #[error("gamma = 1 requires an episodic (acyclic) MDP")]
    NotEpisodic,

    #[error("state budget exceeded: {required} required, budget is {budget}")]
    BudgetExceeded { required: usize, budget: usize },

    #[error("linear system is singular")]
    SingularSystem,

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cross-check failed for {what}: gap {gap:e}")]
    CrossCheck { what: &'static str, gap: f64 },

    #[error("missing reward table entry for completion {0:?}")]
    MissingLeaf(Vec<u32>),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SplError>;

#[derive(Debug, Error)]
pub enum SplError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("requires discrete states")]
    RequiresDiscreteStates,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("rank-deficient design; increase ridge (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("invalid action {action} (environment has {n_actions} actions)")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value iteration did not converge in {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("insufficient data for action {action}: {count} transitions, need at least {needed}")]
    InsufficientData {
        action: usize,
        count: usize,
        needed: usize,
    },

    #[error("method {method} is not available for environment {env}")]
    UnsupportedMethod { method: String, env: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<SplError>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed results file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SplError {
    pub fn context(self, context: impl Into<String>) -> Self {
        SplError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &SplError {
        match self {
            SplError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}

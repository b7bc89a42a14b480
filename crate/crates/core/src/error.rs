use std::path::PathBuf;

/// Errors raised by the library. Invariant violations on data (see
/// [`crate::trajectory::validate_group`]) are reported as values instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("group needs at least 2 entries, got {0}")]
    GroupTooSmall(usize),
    #[error("expected {expected} entries for this group, got {got}")]
    GroupSizeMismatch { expected: usize, got: usize },
    #[error("trajectory belongs to prompt {trajectory}, not prompt {prompt}")]
    PromptMismatch { trajectory: u64, prompt: u64 },
    #[error("no prompt with id {0}")]
    UnknownPrompt(u64),
    #[error("{advantages} advantages supplied for {trajectories} trajectories")]
    AdvantageLength { trajectories: usize, advantages: usize },
    #[error("trajectory {trajectory} step {step} has no usable behavior log-probability")]
    MissingLogProb { trajectory: usize, step: usize },
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("step {step} context (state {state}, turn {turn}) outside the policy table")]
    InvalidContext { step: usize, state: usize, turn: usize },
    #[error("cannot step a terminal episode")]
    TerminalState,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A model, schedule or run configuration violates a constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration file field could not be interpreted.
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },

    /// Targets or samples are inconsistent with the task.
    #[error("data error: {0}")]
    Data(String),

    /// A binary file is malformed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Train-mode batch normalization needs at least two samples.
    #[error("degenerate batch: batch normalization in train mode needs batch size >= 2, got {0}")]
    DegenerateBatch(usize),

    /// A gradient or parameter became NaN or infinite.
    #[error("non-finite value in `{param}` at step {step}")]
    NonFinite { param: String, step: u64 },

    /// A pipeline worker died or a channel closed.
    #[error("worker {component} failed: {message}")]
    Worker { component: usize, message: String },

    /// The schedule simulator reached a state with pending work and nothing runnable.
    #[error("schedule deadlock at slot {slot} with {pending} pending tasks")]
    Deadlock { slot: u64, pending: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Dimension { op, detail: detail.to_string() }
    }

    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field { field: field.into(), message: message.into() }
    }

    /// True for errors caused by invalid user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Field { .. })
    }
}

use alloc::string::String;

/// Errors raised anywhere in the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("empty document")]
    EmptyDocument,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label {label:?} on line {line}")]
    Label { line: usize, label: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate labels: at least two classes are required")]
    DegenerateLabels,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

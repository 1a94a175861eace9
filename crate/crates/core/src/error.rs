use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid convolution spec: {0}")]
    InvalidConvSpec(String),
    #[error("{op}: spatial extent {extent} is not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        extent: usize,
        divisor: usize,
    },
    #[error("{op}: output spatial size would be non-positive")]
    EmptyOutput { op: &'static str },
    #[error("{0}: missing weight")]
    MissingWeight(&'static str),
    #[error("{0}: empty input list")]
    EmptyInput(&'static str),
    #[error("batch_norm: train mode needs more than one value per channel")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("node {node} ({name}): {detail}")]
    Node {
        node: usize,
        name: String,
        detail: String,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("training diverged at iteration {0}: loss is not finite")]
    Diverged(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("quantization: {0}")]
    Quant(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

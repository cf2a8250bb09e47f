use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input {input:?} is smaller than the dilated kernel footprint {footprint}")]
    InputTooSmall { input: Vec<usize>, footprint: usize },

    #[error("invalid layer specification: {0}")]
    InvalidSpec(String),

    #[error("batch normalization needs at least two samples in training mode")]
    BatchNormSingleSample,

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value produced by `{0}`")]
    NonFiniteValue(String),

    #[error("parameter `{0}` is disconnected from the loss")]
    DisconnectedParameter(String),

    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed weights file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;

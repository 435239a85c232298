//! Error type shared by every module of the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor was requested with a zero or overflow-sized dimension.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A convolution or pooling window does not produce a positive output size.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A model or run configuration is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// A label value is outside `[0, num_classes)` and is not the ignore index.
    #[error("label error: {0}")]
    Label(String),

    /// The forward pass asked the weight store for a slot it does not hold.
    #[error("missing weight for slot '{0}'")]
    MissingWeight(String),

    /// Backward was asked for an activation the forward pass did not retain.
    #[error("missing retained activation: {0}")]
    State(String),

    /// A computation produced or was handed a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A learning-rate schedule was queried outside its domain.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iter}: {msg}")]
    Diverged { iter: usize, msg: String },

    /// A weights file failed validation.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// An image file uses a feature the reader does not support (e.g. 16-bit PNG).
    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

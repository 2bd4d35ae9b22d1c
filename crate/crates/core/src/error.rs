use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A tensor operation received inconsistent shapes. `detail` names the
    /// offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A spec or config failed validation.
    #[error("invalid {what}: {detail}")]
    InvalidSpec { what: &'static str, detail: String },

    /// A forward pass produced a non-finite activation.
    #[error("non-finite activation in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    /// A gradient turned non-finite; the training run is unusable.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String },

    /// A serialized artifact does not start with the expected magic bytes.
    #[error("bad magic in {format} file: expected {expected:?}")]
    BadMagic { format: &'static str, expected: Vec<u8> },

    /// A serialized artifact has an unsupported version.
    #[error("unsupported {format} version {found} (supported: {supported})")]
    BadVersion { format: &'static str, found: u32, supported: u32 },

    /// The payload of a serialized artifact is shorter/longer than the header
    /// promised.
    #[error("{format} payload length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { format: &'static str, expected: usize, got: usize },

    #[error("correlation input invalid: {0}")]
    CorrelationInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid network state: {0}")]
    State(String),

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    Numeric { param: String, step: u64 },

    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),

    #[error("checkpoint format error in {path} at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl NetError {
    pub(crate) fn shape(
        layer: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        NetError::Shape {
            layer: layer.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

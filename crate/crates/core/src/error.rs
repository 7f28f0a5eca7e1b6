use std::path::PathBuf;

/// Errors crossing module boundaries. Contract violations inside the numeric
/// kernels (shape mismatches and the like) panic instead; they indicate bugs,
/// not runtime conditions.
#[derive(Debug, thiserror::Error)]
pub enum LdpError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure at EM step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("metric undefined for sample {sample}: {message}")]
    UndefinedMetric { sample: usize, message: String },
}

impl LdpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LdpError::Io { path: path.into(), source }
    }

    /// Exit code contract: 0 ok, 2 config, 3 i/o, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            LdpError::Config(_) | LdpError::Domain(_) => 2,
            LdpError::Format { .. } | LdpError::Io { .. } | LdpError::UndefinedMetric { .. } => 3,
            LdpError::Numerical { .. } => 4,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure (image `{image_id}`, layer `{layer_id}`): {message}")]
    Numeric {
        image_id: String,
        layer_id: String,
        message: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("incomplete calibration, missing: {}", .0.join("; "))]
    IncompleteCalibration(Vec<String>),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("missing feature `{feature}` (image `{image_id}`, layer `{layer_id}`)")]
    MissingFeature {
        feature: String,
        image_id: String,
        layer_id: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            image_id: String::new(),
            layer_id: String::new(),
            message: message.into(),
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::Parameter(message.into())
    }

    /// Attach image/layer ids to a numeric error that was raised without them.
    pub fn with_ids(self, image: &str, layer: &str) -> Self {
        match self {
            Error::Numeric { message, .. } => Error::Numeric {
                image_id: image.to_string(),
                layer_id: layer.to_string(),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 2 validation, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Parameter(_) | Error::Split(_) => 2,
            Error::Numeric { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

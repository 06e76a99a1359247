use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input image has an empty foreground mask")]
    EmptyMask,

    #[error("field output mode mismatch: expected {expected}, field is {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("non-finite density encountered on ray {ray}")]
    NaNPropagation { ray: usize },

    #[error("backend `{backend}` does not support {capability}")]
    Capability {
        backend: String,
        capability: &'static str,
    },

    #[error("attention tap shape mismatch on layer `{layer}`: {detail}")]
    InjectionShape { layer: String, detail: String },

    #[error("signed distance field has a single sign; no surface to extract")]
    EmptySurface,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing back-view normal target")]
    MissingBackNormal,

    #[error("patch has no pixels")]
    EmptyPatch,

    #[error("missing loss component `{0}`")]
    MissingLossComponent(String),

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    Window {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint config hash mismatch: checkpoint {found}, current {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("remote backend error: {0}")]
    Remote(String),

    #[error("external command failed: {0}")]
    External(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

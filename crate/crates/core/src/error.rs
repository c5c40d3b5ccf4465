//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the op. Names the op and the offending dims.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// The op kind cannot apply to operands of this rank/arity.
    #[error("unsupported op {op}: {detail}")]
    UnsupportedOp { op: &'static str, detail: String },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    /// A constructor was handed NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// L2 normalization of a (near-)zero vector.
    #[error("degenerate vector: norm below 1e-12")]
    DegenerateVector,

    /// Embedding with (near-)zero norm reached the cosine head.
    #[error("degenerate embedding: norm below 1e-12")]
    DegenerateEmbedding,

    /// Grad-CAM map is identically zero; attention is undefined.
    #[error("degenerate CAM: map is identically zero")]
    DegenerateCam,

    /// PCA input has zero variance.
    #[error("degenerate projection: input has zero variance")]
    DegenerateProjection,

    #[error("malformed one-hot vector: {0}")]
    MalformedOneHot(String),

    #[error("malformed probability vector: {0}")]
    MalformedProbs(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("soft label row {row} sums to {sum}, expected 1 within 1e-6")]
    SoftLabelSum { row: usize, sum: f64 },

    #[error("cosine {value} outside [-1, 1] beyond clamp tolerance")]
    CosineOutOfRange { value: f64 },

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("unknown layer: {0}")]
    UnknownLayer(String),

    #[error("layer {0} is not a 1x1 convolution")]
    NotConv1x1(String),

    #[error("unknown head: {0}")]
    UnknownHead(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty labeled batch")]
    EmptyBatch,

    #[error("missing plane for sample {id}: channel {channel}")]
    MissingPlane { id: String, channel: usize },

    /// Malformed file content (PGM header, manifest, checkpoint, config).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

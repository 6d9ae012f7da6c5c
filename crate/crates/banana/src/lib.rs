//! Part-aware pointcloud segmentation as a fixed-point computation.
//!
//! A segmentation network is trained so that the ground-truth segmentation is
//! (approximately) a fixed point of the map `y -> f(X, y)`. At inference time
//! the map is iterated from an arbitrary initialization; when the map is
//! contractive the iteration converges to a unique segmentation regardless of
//! the starting point. The network is built from per-part rigid-motion
//! equivariant layers, so the converged output is unaffected by articulation
//! of the input shape.
//!
//! Module map:
//! * [`tensor`] - dense tensors, reverse-mode autodiff tape, checkpoint container
//! * [`se3`] - rigid transforms, per-part actions on pointclouds
//! * [`seg`] - soft segmentations, the permutation-quotient metric, IoU
//! * [`vn`] - vector-neuron style equivariant layer primitives
//! * [`net`] - the part-aware segmentation network
//! * [`fixpoint`] - fixed-point iteration, training, Lipschitz and equivariance audits
//! * [`synth`] - synthetic articulated shapes and dataset generation

pub mod fixpoint;
pub mod net;
pub mod se3;
pub mod seg;
pub mod synth;
pub mod tensor;
pub mod util;
pub mod vn;

pub use tensor::{DType, Tensor};

/// Version string embedded in reports and checkpoints.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Crate-wide error type. Numeric preconditions fail loudly with the
/// offending values rather than propagating NaNs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dtype mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("division by near-zero denominator (min |b| = {min_abs:.3e}); request an epsilon guard for this case")]
    DivNearZero { min_abs: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor belongs to a different tape (expected tape {expected}, got {got})")]
    TapeMismatch { expected: u64, got: u64 },
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("not a rotation: {reason}")]
    InvalidRotation { reason: String },
    #[error("part count mismatch: {lhs} vs {rhs}")]
    PartCountMismatch { lhs: usize, rhs: usize },
    #[error("invalid segmentation: {reason}")]
    InvalidSegmentation { reason: String },
    #[error("non-finite values detected in {layer}")]
    NonFinite { layer: String },
    #[error("joint angle {angle} outside range [{lo}, {hi}]")]
    AngleOutOfRange { angle: f64, lo: f64, hi: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

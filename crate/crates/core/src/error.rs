//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction, tape operations and their shape checks.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: invalid parameter {name} = {value}")]
    Parameter {
        op: &'static str,
        name: &'static str,
        value: f32,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward already ran on this tape; record a fresh forward pass first")]
    BackwardTwice,
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },
}

/// Episode-protocol violations: malformed support sets, label ranges, sampling
/// from splits that cannot supply the requested episode.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("support set for class {class} is empty")]
    EmptySupport { class: usize },
    #[error("episode label {label} out of range 0..{way}")]
    LabelOutOfRange { label: usize, way: usize },
    #[error("global label {label} out of range 0..{count}")]
    GlobalLabelOutOfRange { label: usize, count: usize },
    #[error("split {split} has {available} classes, episode needs {needed}")]
    NotEnoughClasses {
        split: String,
        available: usize,
        needed: usize,
    },
    #[error("class {class} has {available} samples, episode needs {needed}")]
    NotEnoughSamples {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("support labels do not partition into {way} groups of {shot}")]
    BadSupportPartition { way: usize, shot: usize },
}

/// Errors for the on-disk tensor container, dataset files and checkpoints.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a tensor container")]
    BadMagic { path: String },
    #[error("{path}: unsupported container version {version}")]
    BadVersion { path: String, version: u16 },
    #[error("{path}: truncated container ({detail})")]
    Truncated { path: String, detail: String },
    #[error("{path}: malformed manifest line {line}: {detail}")]
    BadManifest {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("dataset hash mismatch: checkpoint has {expected}, dataset is {actual} (use force to override)")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Configuration parse/validation errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("{file}:{line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("[{section}] {key}: {detail}")]
    Invalid {
        section: String,
        key: String,
        detail: String,
    },
}

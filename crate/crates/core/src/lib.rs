//! Few-shot image classification with cross attention between class and
//! query feature maps.
//!
//! The crate is self-contained: a dense-tensor autodiff core, a small
//! convolutional embedding, the cross attention module, episodic losses and
//! inference (inductive and transductive), a procedural glyph dataset, and a
//! training/evaluation harness with JSON-lines metrics.

pub mod cam;
pub mod config;
pub mod container;
pub mod embedding;
pub mod error;
pub mod fewshot;
pub mod harness;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod transductive;
pub mod verify;

pub use error::{ConfigError, DataError, ProtocolError, TensorError};
pub use tensor::{Tape, Tensor, TensorId};

//! Relative-attention transformer with speaker modelling for dialogue
//! understanding, on a small reverse-mode autodiff engine.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dialogue;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autograd::{LabelMode, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;

//! Infrared image super-resolution built on a four-direction state-space
//! scan backbone with wavelet feature modulation.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use autograd::{check_gradients, check_gradients_multi, Gradients, Tape, Var};
pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;

//! Stochastic quantization training for binary and ternary weight networks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inspect;
pub mod nn;
pub mod partition;
pub mod quant;
pub mod run;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{reshape_as_matrix, LayerKind, Tensor, WeightMatrixView};

//! Convolution-attention hybrid vision backbone with ReLU linear attention,
//! a small reverse-mode autodiff engine, multi-teacher feature distillation,
//! and attention scaling benchmarks.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod cli;
pub mod distill;
pub mod error;
pub mod graph;
pub mod memory;
pub mod model;
pub mod par;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

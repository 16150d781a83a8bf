//! Tile-level bytecode compiler, virtual machine and simulated SPMD device.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod format;
pub mod fuser;
pub mod graph;
pub mod isa;
pub mod oracle;
pub mod runtime;
pub mod scalar;
pub mod tiler;
pub mod vm;

pub use error::Error;
pub use scalar::{Dtype, Scalar};

pub type RefTensorF64 = oracle::RefTensor<f64>;
pub type RefTensorF32 = oracle::RefTensor<f32>;

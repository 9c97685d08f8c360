//! A 1-bit neural network engine with binary contextual-dependency blocks.
//!
//! The crate is organised bottom-up:
//!
//! - [`bits`]: sign-packed tensors and XNOR/popcount kernels.
//! - [`autograd`]: a small tape with straight-through estimators.
//! - [`blocks`]: binary conv blocks, long/short-range binary MLP blocks and
//!   dynamic binarization thresholds.
//! - [`network`]: declarative specs, presets, execution and checkpoints.
//! - [`cost`]: analytic BOPs/FLOPs/OPs accounting.
//! - [`train`]: datasets, optimizer, two-step training, sweeps.
//! - [`analysis`]: binarization error statistics.

pub mod analysis;
pub mod autograd;
pub mod bits;
pub mod blocks;
pub mod cost;
pub mod dense;
pub mod error;
pub mod network;
pub mod tensor;
pub mod train;

pub use bits::{BitShape, BitTensor, ScaleMode, ScaleVector};
pub use blocks::sampling::{SamplingOffset, SamplingRange};
pub use blocks::{ExecMode, WeightMode};
pub use cost::CostReport;
pub use error::{Error, Result};
pub use network::{LayerKind, LayerSpec, Network, NetworkSpec};
pub use tensor::RealTensor;

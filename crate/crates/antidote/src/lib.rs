//! antidote: a small CNN training/inference engine built around
//! attention-based dynamic feature-map pruning.
//!
//! Feature maps are scored by parameter-free channel and spatial attention
//! (pooled means), binarized into top-k keep masks per input, and the masked
//! components skip the next convolution. Training with targeted dropout
//! applies the same masks during training with a ratio-ascent schedule so
//! test-time pruning costs little accuracy. A FLOPs meter accounts the
//! dense/dynamic multiply-accumulate costs per layer.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod fsio;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor4;

//! Tensor engine, model components, objectives, synthetic data and metrics
//! for a desk-scale attention-based face swapper. `no_std` with `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod extractors;
pub mod fftm;
pub mod fgm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

//! Feature selection from intermediate backbone activations for transfer
//! learning: a small tape autodiff, reference backbones, activation stores,
//! multi-layer feature pipelines, group-lasso selection and the probe
//! procedures built on top of them.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod probes;
pub mod selector;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

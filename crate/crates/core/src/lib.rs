//! Graph convolutional networks for hyperspectral pixel classification.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod registry;
pub mod sampler;
pub mod spectral;
#[doc(hidden)]
pub mod test_support;

pub use error::{Error, Result};

//! Multi-view graph state-space network (MV-GMN) for multi-view,
//! multi-temporal action recognition.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

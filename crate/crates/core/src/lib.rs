//! Two-stream fundus/OCT classifier with class activation maps.

pub mod cam;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

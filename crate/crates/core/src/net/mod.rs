//! The two-stream residual network, its single-branch baselines and the
//! checkpoint format.

pub mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{BranchConfig, Modality};
pub use model::{
    argmax_rows, random_images, BranchOutput, ForwardOutput, ModelSpec, Stream, TwoStreamModel,
    CLASS_NAMES,
};

//! Manifest handling, pairing, synthetic data and image preprocessing.

pub mod augment;
mod dataset;
pub mod image;
pub mod manifest;
pub mod pairing;
pub mod preprocess;
pub mod synth;

pub use dataset::{check_split_hygiene, eval_samples, single_samples, Batch, Dataset, Sample};
pub use image::Image;
pub use manifest::{BBox, Class, EyeRecord, ImageRef, Split};
pub use pairing::{
    loose_pairs_count, strict_pairs, LooseCount, PairOrigin, PairPool, PairSampler, TrainingPair,
};
pub use synth::{synth_generate, SynthConfig};

//! Datasets and the preprocessing chain.
//!
//! The order is fixed: crop and resize, histogram equalization,
//! standardization with training-split statistics, then (training batches
//! only) augmentation.

pub mod augment;
pub mod cache;
pub mod image;
pub mod manifest;
pub mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical, rotate, AugmentDraw, AugmentPolicy};
pub use cache::{make_batch, prepare, preprocess, Dataset, PrepareConfig, PrepareSummary, Sample};
pub use image::{
    crop_resize, hist_equalize, standardize, ByteImage, FloatImage, PreprocessStats, BACKGROUND_THRESHOLD,
};
pub use manifest::{DatasetManifest, Record, Source, Split};
pub use synth::synth_image;

/// Side length used by the original full-resolution protocol; desk runs use
/// [`PrepareConfig::default`]'s 64.
pub const FULL_SCALE_IMAGE_SIZE: usize = 610;

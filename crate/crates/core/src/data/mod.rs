//! Samples, dataset loading, split protocol, augmentation, batching and
//! the procedural toy dataset.

mod augment;
mod batch;
mod io;
mod sample;
mod split;
mod toy;

pub use augment::{augment, AugmentationConfig, Rotation, Transform};
pub use batch::{compose_batches, BatchIter, BatchPlan, MixedBatch};
pub use io::{
    decode_image, load_directory, resize_image, resize_mask, save_gray_png, to_gray, to_mask, write_sample,
    LoadOptions, SYNTHETIC_MANIFEST,
};
pub use sample::{GrayImage, Mask, Sample, Source};
pub use split::{
    make_splits, manifest_path, parse_manifest, partition_labels, read_manifest, read_split, subset_size,
    write_manifest, write_split, DatasetSplit,
};
pub use toy::{generate_toy, ToyGenConfig};

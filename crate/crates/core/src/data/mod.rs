//! Dataset ingestion: indexing, decoding, resizing, augmentation, splits and
//! batching.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod loader;
pub mod synth;

pub use augment::{augment, warp, Affine, AugmentationSpec};
pub use dataset::{
    apportion, render_split_table, run_background_hook, scan_dataset, split_dataset, validate_ratios, DatasetIndex,
    Entry, Split, SplitSpec,
};
pub use image::{
    decode_image, decode_png, decode_ppm, denormalize, encode_ppm, normalize, resize, to_grayscale, Image, ImageSample,
};
pub use loader::{epoch_order, for_each_batch, load_entries, Batch, SampleSet};
pub use synth::{bundled_synthetic_dir, synthetic_image, write_synthetic_dataset, SYNTHETIC_CLASSES};

//! Image ingest: decode, resize, normalize, augment, and assemble labeled
//! datasets with deterministic splits and batch order.

pub mod augment;
pub mod dataset;
pub mod raster;
pub mod resize;
pub mod synth;

pub use augment::AugmentConfig;
pub use dataset::{
    build_balanced_dataset, build_single_class_dataset, read_manifest, write_manifest,
    DataLoader, Item, LabeledDataset, Split, SplitFracs, LABEL_FAKE, LABEL_REAL,
};
pub use raster::{decode, preprocess, save_png, validate_batch};

//! Portable sample format, synthetic phantom generation and fold splitting.

pub mod folds;
pub mod format;
pub mod phantom;

pub use folds::{stratified_five_fold, FoldSplit, N_FOLDS};
pub use format::{
    read_f32_map, read_manifest, read_sample, write_dataset, write_f32_map, write_manifest,
    write_sample, Dataset, DatasetManifest, ManifestEntry, FORMAT_VERSION,
};
pub use phantom::{generate_phantom, PhantomSpec};

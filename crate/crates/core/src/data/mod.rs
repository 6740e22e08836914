//! Volume I/O, synthetic phantoms, preprocessing, augmentation and fold
//! splitting.

pub mod augment;
pub mod dataset;
pub mod folds;
pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod preprocess;

pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use dataset::{load_samples, synthetic_samples, write_synthetic_split, Sample};
pub use folds::{stratified_kfold, FoldSplit};
pub use manifest::{load_manifest, manifest_csv, Breathing, Phase, SampleRecord};
pub use nifti::{nifti_read, nifti_write, nifti_write_endian, Datatype, Endian, Volume};
pub use phantom::{generate_phantom, Phantom};
pub use preprocess::{preprocess, preprocess_mask, preprocessed_spacing, restore_labels};

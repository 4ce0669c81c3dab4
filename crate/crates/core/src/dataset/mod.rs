//! Manifests, image standardisation, stratified splits and synthetic fixtures.

pub mod image;
pub mod manifest;
pub mod split;
pub mod store;
pub mod synth;

pub use self::image::{standardise, standardise_bytes, standardise_image, ImageTensor, DEFAULT_INPUT_SIZE};
pub use manifest::{load_manifest, AttributeLabels, ImageRecord, Manifest, Target};
pub use split::{make_folds, split_manifest, split_train_test, Fold, FoldPlan, SplitPlan};
pub use store::LabelledImages;

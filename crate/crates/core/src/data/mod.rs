//! Dataset ingestion, augmentation, tensorisation and splitting.

mod augment;
mod manifest;
mod split;
mod synthetic;
mod tensorize;

use std::path::PathBuf;

pub use augment::{augment_dataset, augment_image, AugmentPolicy, Transform};
pub use manifest::{scan_dataset, DatasetManifest, Origin, Sample, ScanReport, SkippedFile, MANIFEST_FILE};
pub use split::{split_by_origin, split_train_test};
pub use synthetic::{generate_synthetic, PAPER_CLASSES};
pub use tensorize::{image_to_tensor, load_image, load_tensors, tensorize, Batch, TensorSet};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset root `{0}` does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>) -> impl FnOnce(image::ImageError) -> DataError {
        let path = path.into();
        move |source| DataError::Image { path, source }
    }
}

//! On-disk formats: NPY float32 tensors and the JSON dataset manifest.
//!
//! Tensors use the NPY v1.0 layout restricted to `descr: '<f4'` and C order.
//! The manifest is a single `manifest.json` whose paths are all relative to
//! the manifest's own directory, so a dataset can be moved as a unit.

mod manifest;
mod npy;

pub use manifest::{
    Category, DatasetManifest, ImageLabel, ImageRecord, ManifestError, TextEmbeddingPaths,
    MANIFEST_VERSION,
};
pub use npy::{decode_tensor, encode_tensor, read_tensor, write_tensor, Tensor, TensorError};

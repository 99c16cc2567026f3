//! Anomaly scoring and pseudo-labelling toolkit for industrial defect datasets.
//!
//! The crate turns precomputed vision-language embeddings into image-level
//! anomaly scores and pixel-level anomaly maps ([`kead`]), derives
//! attention-map distillation targets with analytic loss gradients
//! ([`distill`]), converts anomaly maps into COCO pseudo-defect boxes
//! ([`pseudolabel`]) and evaluates the results ([`metrics`]).
//!
//! All arrays on disk are NPY `<f4` files catalogued by a JSON
//! [`DatasetManifest`](tensorio::DatasetManifest); see [`tensorio`].
//! [`synth`] generates deterministic fixtures with known ground truth and
//! hosts naive reference implementations used by the test suites.

pub mod coco;
pub mod distill;
pub mod error;
pub mod kead;
pub mod map;
pub mod metrics;
pub mod pipeline;
pub mod pseudolabel;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
pub use map::{AnomalyMap, BinaryMask};
pub use tensorio::{read_tensor, write_tensor, DatasetManifest, Tensor};

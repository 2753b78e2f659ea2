//! Dataset manifests, rasters and masks, synthetic corpora and feature files.

mod features;
mod manifest;
mod raster;
mod synthetic;

pub use features::{read_features, write_features, FEATURE_MAGIC};
pub use manifest::{read_manifest, write_manifest, ManifestRecord, Split};
pub use raster::{apply_mask, read_raster, write_raster, Raster, MASK_THRESHOLD};
pub use synthetic::{gen_synthetic, SyntheticCorpus, SyntheticSpec};

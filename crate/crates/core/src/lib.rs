//! Visceral adipose tissue segmentation on CT from a multi-label body
//! segmentation, by Gaussian kernel density estimation of subcutaneous fat
//! intensities, together with thresholding baselines, segmentation metrics
//! and a synthetic phantom generator.

pub mod density;
pub mod distance;
pub mod error;
pub mod grid;
pub mod maskops;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod resample;
pub mod schema;

pub use error::{KevsError, Result};
pub use grid::{BinaryMask, GridGeometry, LabelMap, ScalarVolume, CANONICAL_SPACING};
pub use schema::{LabelSchema, Role};

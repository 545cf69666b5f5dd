//! Wall segmentation for raster floor plans.
//!
//! A hierarchical Mix-Transformer encoder feeds a U-Net style decoder with
//! concurrent spatial/channel squeeze-excitation, trained with an asymmetric
//! Tversky loss. The crate also carries the data side: annotation
//! refinement, augmentation, a procedural floor-plan generator, and the
//! training, evaluation and ablation harness.

pub mod dataprep;
pub mod error;
pub mod losses;
pub mod model;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

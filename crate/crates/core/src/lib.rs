//! Test-time task adaptation for cross-domain few-shot segmentation.
//!
//! Frozen backbone features of one episode are adapted by small per-level
//! heads fitted on view-consistency and prototype losses, compared densely
//! between query and support, fused across levels, thresholded and
//! optionally refined with a dense CRF.

pub mod adapt;
pub mod analysis;
pub mod compare;
pub mod error;
pub mod features;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod pyramid;
pub mod segment;

pub use error::{Error, Result};
pub use features::FeatureVolume;
pub use grid::{Grid, Mask, RgbImage, ScoreMap};

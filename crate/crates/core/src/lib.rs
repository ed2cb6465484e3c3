//! Geometry-aware local feature matching.
//!
//! The pipeline runs co-visible feature interaction over coarse descriptor
//! grids, predicts co-visibility maps, performs adaptive (many-to-one or
//! one-to-one) patch assignment with scale estimation, and refines the
//! surviving proposals to sub-pixel accuracy. Synthetic scenes with exact
//! geometry provide ground truth for labels, losses and metrics.

pub mod error;
pub mod features;
pub mod geometry;
pub mod numerics;
pub mod assignment;
pub mod refine;
pub mod cfi;
pub mod container;
pub mod dataset;
pub mod covisible;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthscene;

pub use error::{Error, Result};
pub use features::FeatureGrid;
pub use numerics::Tensor;

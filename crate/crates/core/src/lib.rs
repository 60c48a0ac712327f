//! Point-source detection with a point proposal network.
//!
//! The crate covers the full pipeline: a synthetic sky simulator, the
//! convolutional detector with its training loop, patch-wise inference with
//! non-maximum suppression, a flood-fill baseline, detection metrics and a
//! timing harness.
//!
//! Coordinates are pixels with `x` the column and `y` the row, origin at the
//! top-left. Radii such as `r_near`, `r_nms` and `r_tp` are in grid units,
//! multiples of the origin spacing.

pub mod bench;
pub mod catalog;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod floodfill;
pub mod geometry;
pub mod image;
pub mod infer;
pub mod net;
pub mod skysim;
pub mod train;

pub use catalog::{Catalog, CatalogKind, PointRecord};
pub use error::{Error, Result};
pub use geometry::GridSpec;
pub use image::Image;

//! Cross-shape scribble supervision toolkit.
//!
//! The pipeline turns a pair of crossing line segments drawn on a target into
//! a dense pseudo mask ([`pseudo_mask`]), resolves overlaps between categories
//! ([`multi_category`]), and drives a size-aware multi-branch training setup
//! ([`size_branching`], [`scoring`], [`losses_metrics`]). [`toy_trainer`] is a
//! small closed-form-gradient model that exercises both training stages on
//! synthetic data, and [`dataset_io`] owns every on-disk format.

pub mod dataset_io;
pub mod geometry;
pub mod grid;
pub mod losses_metrics;
pub mod multi_category;
pub mod pseudo_mask;
pub mod scoring;
pub mod size_branching;
pub mod toy_trainer;

pub use geometry::{build_cross, intersect, shrink_cross, CrossScribble, GeometryError, Point2, Segment};
pub use grid::{Grid, MaskGrid};
pub use multi_category::{combine_pseudo_masks, CategoryId, LabelMap};
pub use pseudo_mask::{initial_weight, rasterize_pseudo_mask, MaskOp, SigmaSpec};

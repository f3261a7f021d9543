//! Whole-slide image tiling, polygon-annotation rasterization, a miniature
//! convolutional classifier with convolutional-weight transfer, and
//! tile-/pixel-level ROC-AUC evaluation.
//!
//! The crate is organized bottom-up:
//!
//! - [`raster`] and [`slide_store`]: 8-bit RGB rasters and their tiled pyramid form.
//! - [`annot`]: ASAP polygon annotations, even-odd mask rasterization, cohort area statistics.
//! - [`tiler`]: the non-overlapping tile grid, background filtering, labeling,
//!   seeded balanced sampling and splits.
//! - [`nnet`]: the classifier, its training loop, Adam, checkpoints and the
//!   conv-weight transfer rule.
//! - [`metrics`]: exact and histogram-binned AUC, probability maps, reports.
//! - [`synth`]: deterministic synthetic cohorts for two tissue domains plus a
//!   generic shape corpus.
//! - [`pipeline`]: JSON configuration and the command implementations used by the CLI.
//!
//! Data-parallel loops go through [`par::Exec`]. With the `parallel` feature
//! (default) `Exec::Parallel` runs on rayon; without it every mode runs sequentially.

pub mod annot;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod slide_store;
pub mod synth;
pub mod tiler;

pub use error::{Error, Result};
pub use par::Exec;

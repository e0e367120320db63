//! Multistage stereo disparity estimation.
//!
//! The pipeline extracts shared-weight features at 1/n scale, correlates
//! them into one low-resolution 4D volume, decodes all d_max similarity
//! scores from it in n serial stages with cross-stage voting, assembles the
//! full-resolution cost volume, and reads out sub-pixel disparity. Training
//! data comes from seeded random-dot stereograms with exact ground truth.
//!
//! Module map:
//! - [`domain`]: config and shared value types
//! - [`data`]: synthetic stereograms, PFM / 16-bit PNG I/O, batching
//! - [`tensor`] / [`nn`]: tape autodiff and layer primitives
//! - [`features`], [`costvol`], [`aggregation`], [`assembly`],
//!   [`regression`]: the pipeline stages
//! - [`supervision`]: per-stage targets and losses
//! - [`train`], [`eval`]: optimization loop, metrics, ablations

// negated float comparisons reject NaN; index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod aggregation;
pub mod assembly;
pub mod costvol;
pub mod data;
pub mod domain;
pub mod eval;
pub mod features;
pub mod network;
pub mod nn;
pub mod regression;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use domain::{Config, Error, Result};

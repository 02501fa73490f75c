//! Gaze-supervised intensity heatmaps for chest radiographs.
//!
//! Radiologist fixations are turned into per-anatomy ground-truth heatmaps,
//! a prompt-conditioned adapter on top of a frozen encoder learns to predict
//! them, and the predicted heatmap masks the image before a linear finding
//! classifier.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod backbone;
pub mod classifier;
pub mod data_schema;
mod error;
pub mod gazeprep;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

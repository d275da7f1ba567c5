//! Magnitude regression on bi-temporal SAR tile pairs, trained with a mean
//! squared error term plus an all-pairs margin ranking term.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: tile and manifest file formats, deterministic batching.
//! - [`preprocess`]: decibel conversion, normalization, paired flips, stacking.
//! - [`synthgen`]: synthetic pre/post tile pairs with magnitude-coupled deformation.
//! - [`model`]: a small convolutional regressor with hand-written backward pass.
//! - [`losses`]: MSE, pair construction, margin ranking and the composite objective.
//! - [`optim`]: AdamW and the linear warmup/decay schedule.
//! - [`train`], [`metrics`], [`gradcheck`], [`ablation`], [`report`]: the
//!   experiment harness built on top.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};

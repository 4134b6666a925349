//! Weakly-supervised classification of polarimetric slide images.
//!
//! The pipeline has three stages:
//!
//! 1. [`pixelclf`] trains a gradient-boosted tree classifier on sparse, noisy
//!    pixel annotations, with [`confident`] learning removing suspect labels,
//!    and produces a per-pixel structure probability map.
//! 2. [`distill`] trains a small convolutional encoder–decoder to reproduce
//!    those maps patch by patch, then exports the encoder's patch embeddings.
//! 3. [`mil`] pools patch embeddings with gated attention into one ROI
//!    representation and scores it with three one-vs-rest heads.
//!
//! [`data`] provides the synthetic slide generator and every on-disk format,
//! [`eval`] the ROC/AUC metrics and the label-noise sweep, [`render`] the
//! pseudo-H&E colouring, and [`pipeline`] the stage orchestration behind the
//! `polarpath` binary.

pub mod confident;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod mil;
pub mod nn;
pub mod pipeline;
pub mod pixelclf;
pub mod render;
pub mod seed;

pub use error::{Error, Result};

//! Evidential regression for wind gust post-processing.
//!
//! A dense network predicts the four parameters of a Normal-Inverse-Gamma
//! distribution per sample. From those the crate derives the predicted gust,
//! its aleatoric and epistemic variance, prediction intervals and a flag for
//! highly uncertain predictions. Around the model sit the evaluation metrics
//! (error scores, PICP, PIT/PITD, spread-skill, discard fraction),
//! permutation importance and partial dependence, gridded post-processing
//! and a multi-objective random hyperparameter search.
//!
//! Module map:
//!
//! - [`nncore`]: feed-forward network, backpropagation, Adam.
//! - [`evidential`]: NIG head, loss, uncertainty decomposition, training.
//! - [`metrics`]: evaluation surface.
//! - [`xai`]: permutation feature importance and partial dependence.
//! - [`spatial`]: grid gradients, normalization, max tracking, bilinear interpolation.
//! - [`data`]: CSV ingestion, feature encoding, storm-wise split, standardization.
//! - [`tune`]: hyperparameter space, sampling, Pareto search.
//! - [`artifact`]: versioned model file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod data;
pub mod error;
pub mod evidential;
pub mod metrics;
pub mod nncore;
pub mod spatial;
pub mod tune;
pub mod xai;

pub use error::{Error, Result};

//! Probabilistic multi-rater segmentation.
//!
//! A small convolutional backbone produces per-pixel features; each rater
//! (plus a "gold" consensus rater) owns a multivariate Gaussian over a latent
//! code that is broadcast over the image and fed, together with the features,
//! into a pixelwise segmentation head. Training maximizes a variational bound
//! with reparameterized latent samples; prediction averages Monte-Carlo
//! samples and reports their spread as uncertainty.
//!
//! Around the model sit a STAPLE label-fusion baseline, agreement metrics
//! (Cohen's kappa, IoU), and a synthetic multi-rater data generator whose
//! raters follow planted labelling behaviours.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod inference;
pub mod kv;
pub mod latent;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

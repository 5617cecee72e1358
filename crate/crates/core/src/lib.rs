//! Denoising-driven data augmentation for univariate time series.
//!
//! The crate trains conditional denoisers (a denoising autoencoder and a
//! diffusion model sharing one U-Net backbone) on top of fifteen per-segment
//! meta-attributes, uses them to synthesise training samples for a downstream
//! multi-scale CNN, and compares augmentation strategies with a Bayesian
//! signed-rank test.

pub mod augment;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod meta_attr;
pub mod models;
pub mod nn;
pub mod stats;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

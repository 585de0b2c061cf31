//! Multi-crop county-level yield prediction at desk scale: a multimodal
//! encoder over satellite image and weather time series, a crop-aware
//! temporal decoder with a phenology bank and phenology-guided attention,
//! contrastive pretraining, a synthetic data generator with a known yield
//! process, and the training/evaluation pipeline around them.

pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod pretrain;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

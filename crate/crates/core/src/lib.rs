//! Illumination-invariant low-light enhancement: color-aware transform,
//! content-noise decomposition and a small trainable backbone on top of
//! `picat-tensor`.

pub mod backbone;
pub mod cat;
pub mod cndn;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod layers;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use dataset::{Pair, PairedDataset};
pub use image::{LuminanceMap, SrgbImage};
pub use model::{InitMode, ModelConfig, PiCat, Variant};

pub type Image = SrgbImage<f32>;
pub type Image64 = SrgbImage<f64>;
pub type Model = PiCat<f32>;
pub type Model64 = PiCat<f64>;
pub type Dataset = PairedDataset<f32>;

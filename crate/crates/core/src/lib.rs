//! Detection of spurious tokens in Vision-Transformer feature maps and
//! their removal by contrastive-register self-distillation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the double-precision instantiation the pipeline uses
//! by default.

pub mod distill;
pub mod error;
pub mod filter;
pub mod image;
pub mod io;
pub mod numerics;
pub mod pca;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Image64 = image::Image<f64>;
pub type FeatureMap64 = vit::FeatureMap<f64>;
pub type AttentionTrace64 = vit::AttentionTrace<f64>;
pub type ModelState64 = vit::ModelState<f64>;
pub type ModelState32 = vit::ModelState<f32>;

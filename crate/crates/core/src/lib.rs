//! Two-person proxemics toolkit: a simplified parametric body model,
//! contact-map-constrained two-stage fitting, a transformer denoising-diffusion
//! prior over the joint parameter space of two interacting people,
//! diffusion-guided fitting without contact labels, and evaluation metrics.

pub mod autodiff;
pub mod error;
pub mod geometry;

pub use error::{Error, Result};

//! Gradient inversion attacks on federated learning with sigmoid networks.
//!
//! The library covers the full pipeline: model definitions and two
//! independent gradient routes, a closed-form single-input reconstruction,
//! feasibility counting for batch attacks, an iterative gradient-matching
//! engine with double backpropagation, and a federated simulation that the
//! attacks plug into.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod closed_form;
pub mod config;
pub mod convolve;
pub mod data;
pub mod error;
pub mod feasibility;
pub mod fl;
pub mod metrics;
pub mod models;
pub mod pgm;
pub mod recon;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::Tensor;

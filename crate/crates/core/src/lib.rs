//! Training, landscape certification and feature-recovery measurement for a
//! one-layer nonlinear self-supervised model on a synthetic two-feature
//! distribution, with a supervised baseline.

pub mod activation;
pub mod calculus;
pub mod data;
pub mod error;
pub mod experiments;
pub mod landscape;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod training;
pub mod verify;

pub use activation::ActivationKind;
pub use error::{Error, Result};

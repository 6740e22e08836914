//! Multi-task Swin UNETR for cardiac MR: one network that segments the left
//! ventricle, myocardium and right ventricle and grades motion artifacts,
//! together with the training and evaluation harness around it.
//!
//! The crate is self-contained: [`tensor`] is a small reverse-mode autograd
//! engine, [`swin`] and [`model`] build the network on top of it, [`loss`]
//! and [`metrics`] hold the objective and evaluation measures, [`data`]
//! reads NIfTI volumes and generates synthetic phantoms, and [`train`] runs
//! cross-validated training, ensembling and prediction.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

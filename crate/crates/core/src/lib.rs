//! Semi-supervised contrastive regression for appearance-based gaze
//! estimation, built on a small reverse-mode autodiff core.
//!
//! The pipeline has two stages. An encoder of multi-rate dilated
//! convolutions and a projection head are pretrained on unlabeled images
//! with a loss combining NT-Xent (view invariance) and a cross-correlation
//! redundancy penalty. A regression head is then fitted on the frozen
//! encoder with a Huber loss, and predictions are scored by mean angular
//! error.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

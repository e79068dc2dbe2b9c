//! Polynomial-activation MLPs trained with an input-Jacobian penalty, plus the
//! ReLU baselines, metrics and data plumbing needed to compare them.
//!
//! The forward pass of a [`PolyNetwork`] can carry, alongside the activations,
//! the cumulative Jacobian of every layer with respect to the input
//! ([`forward_dual`]). The squared Frobenius norms of those Jacobians form the
//! training penalty, and composing the head Jacobian with the loss gradient
//! gives per-sample input gradients without a backward pass.

pub mod baselines;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod polynet;
pub mod tape;
pub mod train;

pub use baselines::{matched_capacity, BaselineNet, Mode};
pub use data::{Dataset, Preprocessor, Schema, SplitPlan};
pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use polynet::{dreg_penalty, forward_dual, forward_values, ActivationCoeffs, PolyNetwork};
pub use train::{train, TrainConfig, Trainable};

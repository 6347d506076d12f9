//! Stochastic flow map learning.
//!
//! Learns the one-step law `x_{n+1} | (x_n, gamma_n)` of a stochastic system
//! driven by a known excitation, where `gamma_n` holds the coefficients of a
//! local polynomial fit of the excitation over `[t_n, t_n + dt)`. The learned
//! model is a conditional masked autoregressive flow; rolling it out under any
//! new excitation gives long-horizon ensemble predictions.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod dataset;
pub mod error;
pub mod excitation;
pub mod flow;
pub mod predict;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision flow, the default for training and prediction.
pub type Flow = flow::FlowModel<f64>;
/// Single-precision flow; about twice as fast to train.
pub type FlowF32 = flow::FlowModel<f32>;
pub type TrainState = training::TrainState<f64>;
pub type NormStats = dataset::NormStats<f64>;

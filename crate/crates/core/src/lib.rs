//! Federated side-tuning: forward-only clients upload tapped backbone
//! activations and output deviations; an asynchronous server trains a
//! shared side network on whatever arrives.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod alignment;
pub mod autograd;
pub mod backbone;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod server;
pub mod sidenet;
pub mod sim;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};

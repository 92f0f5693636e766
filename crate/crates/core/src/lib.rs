//! Deterministic DNNs, stochastic feedforward networks (SFNNs), and the
//! intermediate simplified-SFNN model, together with the parameter-transfer
//! pipeline DNN -> simplified-SFNN -> SFNN -> DNN*, Monte Carlo training
//! estimators, and numerical certification of the transfer bounds.
//!
//! Everything runs on the CPU in f64. All randomness flows through
//! [`rng::RngStream`], so every result is reproducible from a seed.

#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod math;
pub mod network;
pub mod rng;
pub mod training;
pub mod transfer;
pub mod verify;

mod error;

pub use error::{Error, Result};
pub use math::{ActivationKind, Matrix, SquashKind};
pub use network::{
    ForwardMode, LayerSpec, MarginalKind, NetworkSpec, OutputHead, Params, Violation,
};
pub use rng::RngStream;

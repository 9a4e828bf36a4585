//! Deterministic federated-learning simulator.
//!
//! Fast clients train the full global model; slow clients train a
//! structurally pruned sub-model whose kept neurons and filters are chosen
//! from activation statistics. Server-side aggregation is either a masked
//! sample-weighted mean or a per-coordinate Normal draw around that mean.

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{FedError, Result};
pub use tensor::Tensor;

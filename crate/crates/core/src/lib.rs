//! Desk-scale mixture-of-experts language-model lab.
//!
//! Everything needed to define, train, and sweep FLOP-matched MoE
//! transformer LMs on a CPU: exact-rational configuration algebra,
//! a reverse-mode autodiff engine, token-choice routing with dropless
//! and capacity-limited dispatch, and a deterministic sweep harness.

pub mod config;
pub mod harness;
pub mod model;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{Granularity, MoELayerSpec, ModelArchSpec, Rational};
pub use tensor::{Graph, TensorData, TensorId};

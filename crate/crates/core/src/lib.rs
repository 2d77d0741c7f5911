//! Multi-agent reinforcement learning with one-step consistency policies
//! guided by a shared discrete intention codebook.
//!
//! Learned components are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual `f64` instantiation.

pub mod buffers;
pub mod consistency;
pub mod critic;
pub mod diffnet;
pub mod env;
pub mod error;
pub mod harness;
pub mod intention;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network = diffnet::Network<f64>;
pub type ConsistencyPolicy = consistency::ConsistencyPolicy<f64>;
pub type DeterministicPolicy = consistency::DeterministicPolicy<f64>;
pub type NoiseSchedule = consistency::NoiseSchedule<f64>;
pub type CriticPair = critic::CriticPair<f64>;
pub type IntentionCodebook = intention::IntentionCodebook<f64>;
pub type IntentionLearner = intention::IntentionLearner<f64>;
pub type ReplayBuffer = buffers::ReplayBuffer<f64>;
pub type ReferenceBuffer = buffers::ReferenceBuffer<f64>;
pub type Trainer = trainer::Trainer<f64>;

//! Small fixed-shape MLPs with explicit reverse-mode gradients, Adam, and
//! EMA target copies.

mod activation;
pub mod checkpoint;
mod mlp;

pub use activation::{activation_eval, softplus, Activation, OutputActivation};
pub use checkpoint::Container;
pub use mlp::{ema_blend, AdamConfig, ForwardCache, Gradients, MlpSpec, Network};

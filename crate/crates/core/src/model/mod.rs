//! The primary network: a decoder-only transformer whose blocks can share
//! storage, with its own gradients and optimizer.

pub mod checkpoint;
mod config;
mod scalar;
mod store;
mod transformer;

pub use config::{GlobalLayout, LayerLayout, ModelConfig};
pub use scalar::Scalar;
pub use store::{Gradients, ParameterStore, Slot, StartMode, TransitionOptions};
pub use transformer::{perplexity_from_loss, Logits, DEFAULT_PPL_CEILING};

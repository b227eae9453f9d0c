//! Streaming block-autoregressive flow-matching engine.
//!
//! Generates latent frame sequences block by block with a small diffusion
//! transformer. Clean context is routed through its own input projection and
//! restricted attention masks so context encoding can be cached across
//! diffusion steps (encoder-decoder engine) or across both steps and time
//! (block-causal engine). A post-training stage supervises whole multi-block
//! rollouts adversarially to curb error accumulation in long generations.

pub mod bench;
pub mod data;
pub mod error;
pub mod flow;
pub mod latent;
pub mod model;
pub mod posttrain;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

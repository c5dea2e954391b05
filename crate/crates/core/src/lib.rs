//! Embedding language model toolkit: a small decoder that reads domain
//! embedding vectors through an adapter, the synthetic world and embedding
//! spaces it is trained on, consistency metrics, embedding-space geometry and
//! KL-regularized policy-gradient fine-tuning.

pub mod embed;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rlaif;
pub mod rng;
pub mod service;
pub mod train;
pub mod world;

pub use error::{ElmError, Result};

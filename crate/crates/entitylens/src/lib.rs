//! entitylens: a desk-scale, end-to-end lab for entity-recognition latents in
//! small language models.
//!
//! The pipeline trains a toy decoder-only transformer on a synthetic factual
//! world, trains JumpReLU sparse autoencoders on its residual streams, scores
//! latents that separate familiar from unfamiliar entities, and causally
//! probes those directions: knowledge-refusal steering, weight
//! orthogonalization, activation patching, attention-to-entity analysis,
//! self-knowledge probes, and error-predictive uncertainty latents.

pub mod container;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod sae;
pub mod rng;
pub mod store;
pub mod tokenizer;
pub mod world;

pub use error::{Error, Result};

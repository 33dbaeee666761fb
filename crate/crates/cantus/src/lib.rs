//! Desk-scale music token stack.
//!
//! The crate covers the full loop: structured lyrics and tag conditioning,
//! an RVQ compressor over synthetic multi-level features, a flow-matching
//! latent decoder with reflow distillation, a global/local factorized token
//! LM with weighted cross-entropy and DPO preference tuning, contrastive
//! audio-text alignment, and a decode engine with KV caching, fixed-shape
//! replay stepping, streaming and batching.

pub mod cond;
pub mod error;
pub mod features;
pub mod io;
pub mod kmeans;
pub mod lyrics;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod rvq;
pub mod signal;
pub mod tags;
pub mod tape;
pub mod tensor;
pub mod tok;

pub use error::{Error, Result};

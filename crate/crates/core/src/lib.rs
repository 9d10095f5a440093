//! Desk-scale encoder-decoder codec language model with progress-monitoring
//! rotary cross-attention, plus the corpus, training, decoding and evaluation
//! machinery around it.

pub mod cli;
pub mod decoding;
pub mod duration;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod positional;
pub mod synthcorpus;
pub mod training;

pub use error::{Error, Result};

//! Cold-start cross-domain recommendation with plug-in adapters over frozen
//! per-domain embedding backbones.
//!
//! The crate covers the whole pipeline: interaction loading and splitting,
//! BPR backbone pretraining, adapter training, a mapping baseline, and
//! leave-one-out evaluation.

pub mod adapter;
pub mod baseline;
mod batching;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod util;

pub use error::{Error, Result};

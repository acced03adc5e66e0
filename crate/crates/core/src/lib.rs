//! Attribute-aware CTR prediction for relevant recommendations.
//!
//! Per-attribute activation units score a behavior sequence against the
//! trigger and the target item ([`aavg`]); the scores are compressed along
//! the attribute and sequence axes into similarity and diversity vectors
//! ([`bcr`]); a hypernetwork conditioned on channel, browsing time, and the
//! trigger generates the weights that fuse them ([`sduf`]). [`model`]
//! assembles the network and a DIN baseline, [`datasynth`] generates
//! synthetic logs, and [`traineval`] trains and evaluates.

pub mod aavg;
pub mod bcr;
pub mod cli;
pub mod config;
pub mod datasynth;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod sduf;
pub mod traineval;

pub use error::{Error, Result};

// The tape allocates and frees many short-lived buffers per step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

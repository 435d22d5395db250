//! Train Top-K sparse autoencoders on exported activation matrices, explain
//! each learned feature as a ranked word set, steer activation streams with
//! the explained features, and validate the whole loop on a synthetic
//! topic-model corpus with known ground truth.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`store`] — binary shard/embedding containers, manifests, batch plans.
//! - [`sae`] — the Top-K autoencoder, its optimizer, and training loop.
//! - [`explain`] — mutual-information word rankings plus the max-activating
//!   span baselines (TopAct, N2G).
//! - [`steer`] — amplification and calibration transforms over activation
//!   streams.
//! - [`topicgen`] — a random-walk discourse corpus generator with
//!   ground-truth topics, used to score explanations.
//! - [`eval`] — the end-to-end experiment comparing explanation methods.
//! - [`cli`] — the `saesteer` command-line front end.
//!
//! The runnable `examples/` show each stage in isolation; `saesteer --help`
//! documents the equivalent subcommands.

pub mod cli;
pub mod error;
pub mod eval;
pub mod explain;
pub mod math;
pub mod sae;
pub mod steer;
pub mod store;
pub mod topicgen;

pub use error::{Error, Result};

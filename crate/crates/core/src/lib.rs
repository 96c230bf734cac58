//! Simulator for one-shot incremental federated learning.
//!
//! Clients upload per-class mean embeddings once per task; the server turns
//! them into synthetic training data with a conditional diffusion model,
//! trains a linear head over a frozen encoder and keeps a small memory of
//! the most informative synthetic samples for replay.

pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod ledger;
pub mod orchestrator;
pub mod seeding;
pub mod selftest;
pub mod ssr;
pub mod trainer;

pub use error::{Error, Result};

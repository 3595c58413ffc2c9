//! Desk-scale testbed for feature forgetting in continual learning.
//!
//! The crate generates a synthetic universe of regression tasks that share
//! low-level features, trains ReLU MLPs on task sequences (plain, with gating
//! adapters, or with classic forgetting-mitigation strategies), and measures
//! representation quality by finetuning on freshly drawn tasks.

pub mod error;
pub mod linalg;
pub mod rng;

pub use error::{Error, Result};
pub mod network;
pub mod tasks;
pub mod training;
pub mod eval;
pub mod experiment;

//! Longitudinal instruction fine-tuning.
//!
//! Builds curricula from temporally ordered timelines, trains a causal LM
//! with a temporal–label conditioning module and staged low-rank adapters
//! under a four-term loss, evaluates in-context classification, and runs
//! probing, attention-routing and history activation-patching analyses.

pub mod adapters;
pub mod builder;
pub mod conditioning;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod interp;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod tensors;
pub mod tokenspace;
pub mod toylm;
pub mod trainer;

pub use error::{LiftError, Result};

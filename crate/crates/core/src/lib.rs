//! Instance-level ensembling of tabular models.
//!
//! For each target row the engine gathers what a set of already-trained
//! models say about it and about its nearest training neighbors, then
//! either trusts their consensus or hands the case to a completion backend
//! (a remote chat model or the deterministic in-crate expert).

pub mod context;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod expert;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod router;
pub mod synthetic;

pub use error::{Error, Result};

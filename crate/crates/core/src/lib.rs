//! Logic-aware retrieval for legal question answering.
//!
//! The pipeline extracts fact-rule chains from question/answer pairs with an
//! llm, learns to extend a question's chain toward the lawyer's reasoning
//! with REINFORCE, ranks database questions with a DSSM scorer over chain and
//! text embeddings, and prompts an llm with the top-ranked exemplars.

pub mod data;
pub mod dssm;
pub mod embedding;
pub mod error;
pub mod fact_rule;
pub mod generation;
pub mod llm;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod policy;
pub mod synthetic;

pub use error::{LsimError, Result};

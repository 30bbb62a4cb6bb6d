//! Rhetorical-role classification of related-work sentences.
//!
//! The crate covers the annotation schema, dataset handling, LLM backends,
//! zero-shot prompting and parsing, evaluation metrics, inter-annotator
//! agreement, paraphrase augmentation, and the `scisent` command line.

pub mod agreement;
pub mod augment;
pub mod backend;
pub mod classify;
pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod schema;

pub use schema::{parse_label, Category};

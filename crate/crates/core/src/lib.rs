//! Tooling for codebook-driven LLM coding of classroom dialogue.
//!
//! The pipeline runs from a [`codebook::Codebook`] and an
//! [`prompt::InstructionConfig`], through [`prompt::compile_instructions`],
//! to batched coding sessions in [`coder`] and agreement metrics in
//! [`evaluation`]. [`experiment`] compares example-selection conditions and
//! records feedback lineage; [`store`] persists everything as plain files.

pub mod baseline;
pub mod codebook;
pub mod coder;
pub mod evaluation;
pub mod experiment;
pub mod prompt;
pub mod store;
pub mod synthetic;
pub mod transcript;

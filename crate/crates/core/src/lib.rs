//! Retrieval-security laboratory for studying poisoning attacks against
//! retrieval-augmented generation and the retrieval-layer defenses that
//! counter them.
//!
//! The crate is organized around the lifecycle of a poisoning experiment:
//!
//! - [`corpus`] — document ingestion, tokenization, and corpus statistics
//! - [`embedding`] — embedding-provider contract with a deterministic
//!   offline embedder and a remote HTTP client
//! - [`index`] — exact dense vector index and sparse BM25 index
//! - [`retrieval`] — pure-vector and hybrid (fused, min-max normalized)
//!   retrieval
//! - [`attack`] — dual-document coordinate-search optimizer, joint
//!   sparse+dense objective, and keyword injection
//! - [`detection`] — retrieval-side detectors and ROC/F1 scoring machinery
//! - [`evaluation`] — attack-success metrics, experiment runner, and
//!   proportion statistics
//! - [`pipeline`] — RAG context assembly behind a generation-provider
//!   contract, with a deterministic scripted stub
//! - [`synth`] — synthetic corpus generators for desk-scale experiments

pub mod attack;
pub mod corpus;
pub mod detection;
pub mod embedding;
pub mod evaluation;
pub mod index;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

/// Crate version string recorded in manifests and reports.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

//! Retrieval-robust question answering orchestration.
//!
//! The crate is organised around the Self-Ask decomposition loop:
//!
//! * [`types`] and [`dataset`] hold the shared records and the line-delimited
//!   dataset format.
//! * [`selfask`] parses and renders the Self-Ask text format and assembles
//!   few-shot prompts.
//! * [`backends`] defines the generation / entailment service contracts along
//!   with HTTP clients and deterministic replay doubles.
//! * [`retrieval`] snapshots search results into an index and injects
//!   controlled noise (top-1, low-ranked, random evidence).
//! * [`controller`] interleaves generation with retrieval and implements the
//!   NLI back-off strategy from [`nligate`].
//! * [`datagen`] produces mixed-relevance fine-tuning corpora.
//! * [`eval`] scores runs and builds robustness reports.

pub mod backends;
pub mod controller;
pub mod dataset;
pub mod datagen;
pub mod eval;
pub mod nligate;
pub mod retrieval;
pub mod rng;
pub mod selfask;
pub mod types;

pub use types::{
    ContextBundle, DatasetId, DecompositionTrace, EvidenceSnippet, QaExample, RunRecord, Step,
    Tier,
};

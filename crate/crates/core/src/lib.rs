//! Benchmark harness for LLM-generated surgical billing claims.
//!
//! The pipeline mirrors how a coding model is evaluated against coder-assigned
//! claims: corpus ingestion and a date-balanced split, prompt construction
//! (fine-tuned, retrieval-augmented, and base formats), retrieval of similar
//! encounters from a flat vector index, generation through an external
//! completion endpoint, code extraction from model output, and scoring with
//! validity checks, set-overlap metrics, text-structure metrics, and
//! bootstrap intervals.

pub mod bootstrap;
pub mod claims;
pub mod cohort;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod registry;
pub mod report;
pub mod retrieval;
pub mod stats;
pub mod stub;
pub mod synth;

pub use claims::{
    canonicalize_cpt, canonicalize_icd10, format_claim, parse_claim, BillingClaim, CodeSets,
    CptCode, CptLine, EncounterRecord, Icd10Code, ModifierCode, ParsedClaim, ProviderBillables,
};
pub use error::{Error, Result};

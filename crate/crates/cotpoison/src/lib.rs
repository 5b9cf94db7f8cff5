//! Red-team tooling for clean-label poisoning of chain-of-thought datasets.
//!
//! The crate builds poisoned reasoning corpora by weaving adversarial
//! reasoning traces into the chains of thought of selected "carrier"
//! training samples while leaving every query and final answer untouched,
//! then measures how well the payload activates (attack success rate on
//! target vs. non-target query suites) and how well standard defenses
//! (perplexity filtering, consistency autorating) detect the manipulation.
//!
//! Modules follow the pipeline order:
//!
//! - [`corpus`]: dataset loading, validation, carrier selection, and the
//!   clean-label contract between original and poisoned corpora.
//! - [`scoring`]: compiled binary scoring functions over response text.
//! - [`backend`]: the text-generation gateway (remote chat endpoint or
//!   deterministic mock) with retries and thought/response splitting.
//! - [`forge`]: construction of the adversarial target set from behavior
//!   specs and query suites.
//! - [`integrator`]: concat and LLM-merge trace integration plus poisoned
//!   corpus assembly.
//! - [`evaluator`]: attack-success-rate and utility-accuracy metrics.
//! - [`sentinel`]: perplexity and autorater defenses with ROC reporting.
//! - [`pipeline`]: end-to-end orchestration from a single JSON config.

pub mod backend;
pub mod corpus;
pub mod evaluator;
pub mod forge;
pub mod hashing;
pub mod integrator;
pub mod pipeline;
pub mod scoring;
pub mod sentinel;

pub use corpus::{Corpus, CorpusManifest, ReasoningSample};
pub use scoring::{FieldPolicy, Matcher, MatcherSpec};

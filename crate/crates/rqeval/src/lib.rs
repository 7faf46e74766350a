//! Reasoning-quality evaluation harness for coding tasks.
//!
//! The crate evaluates AI reasoning chains against binary ground-truth
//! verdicts. Six scoring strategies live behind one [`eval::Evaluator`]
//! trait and are selected by name from a registry: a two-stage
//! evidence-verified judge with ambiguity-aware score correction, plus five
//! baseline protocols. Around them sit rank metrics, an LLM gateway with
//! deterministic mocks and a content-addressed response cache, a
//! mismatch-analysis pipeline that open-codes evaluator failures into a
//! taxonomy, dataset loading and sampling, and a resumable experiment
//! runner.

pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod metrics;
pub mod mismatch;
pub mod model;
pub mod parallel;
pub mod prompts;
pub mod runner;

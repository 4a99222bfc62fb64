//! Early exit for multi-step reasoning streams.
//!
//! Long chain-of-thought generations usually settle on their final answer
//! well before they stop talking. This crate watches a reasoning stream as
//! it arrives, asks the model between steps what its answer would be right
//! now, and stops the stream once those provisional answers are both
//! *consistent* (the same answer keeps showing up across a sliding window
//! of recent steps) and *confident* (the answer tokens carry low entropy).
//!
//! The pipeline, in stream order:
//!
//! * [`stepper`] — splits the incoming token stream into reasoning steps
//!   at discourse markers ("Wait", "But", …), scanning incrementally so
//!   results never depend on token boundaries or scan timing.
//! * [`induction`] — renders the answer-probe prompt, runs it, and parses
//!   the boxed answer plus its token distributions into step evidence.
//! * [`scoring`] — turns a window of step evidence into per-candidate
//!   consistency, confidence, and combined stability scores, and applies
//!   the threshold test. Generic over the float type; [`f64`] is used
//!   everywhere downstream.
//! * [`controller`] — the session loop tying the above together, with the
//!   early-exit policy and its baselines (single-step confidence, vanilla
//!   full generation, fixed token budget, gold-answer oracle).
//! * [`drivers`] — where tokens come from: a live OpenAI-compatible
//!   streaming client, a deterministic recorded-trace replayer, and a
//!   recorder that wraps any driver and writes a replayable trace.
//! * [`harness`] — batch evaluation over problem sets: accuracy, token
//!   cost, and compression metrics, parameter sweeps by offline
//!   re-scoring, trade-off curves, and analysis exports.

pub mod controller;
pub mod drivers;
pub mod error;
pub mod harness;
pub mod induction;
pub mod scalar;
pub mod scoring;
pub mod stepper;

pub use controller::{
    run_fixed_budget, run_oracle, run_policy, run_single_step, run_trace, run_vanilla,
    ExitDecision, ExitReason, Policy, SessionConfig, SessionRecord, StepRecord,
};
pub use error::{Error, Result};
pub use induction::{canonicalize, numerically_equal, parse_answer, InducedAnswer, InductionPrompt};
pub use scalar::Scalar;
pub use stepper::{BoundaryEvent, ReasoningStep, Segmenter, SegmenterConfig};

/// Sliding-window scoring parameters at the default precision.
pub type WindowConfig = scoring::WindowConfig<f64>;
/// Per-step induction evidence at the default precision.
pub type StepEvidence = scoring::StepEvidence<f64>;
/// Scored window candidate at the default precision.
pub type CandidateScore = scoring::CandidateScore<f64>;
/// Window scoring outcome at the default precision.
pub type StabilityReport = scoring::StabilityReport<f64>;
/// Token probability distribution at the default precision.
pub type TokenDistribution = scoring::TokenDistribution<f64>;
/// Answer confidence at the default precision.
pub type AnswerConfidence = scoring::AnswerConfidence<f64>;

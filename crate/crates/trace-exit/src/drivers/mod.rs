//! Model access: a uniform driver interface with deterministic file
//! replay, session recording, and a live OpenAI-compatible streaming
//! client.
//!
//! Drivers are pull-based: the session loop requests one token at a time,
//! so cancelling generation is simply ceasing to pull (plus
//! [`ModelDriver::cancel_stream`] to release the upstream source).

mod live;
mod recording;
mod replay;

pub use live::{EndpointConfig, LiveDriver};
pub use recording::RecordingDriver;
pub use replay::{ReplayDriver, ReplayTrace, ReplayTraceBuilder, REPLAY_SCHEMA};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::TokenDistribution;

/// Lowest candidate probability a driver may emit. Log-probabilities below
/// ln(floor) clamp here so no candidate carries an exact zero into entropy
/// renormalization.
pub const PROBABILITY_FLOOR: f64 = 9.357622968840175e-14; // exp(-30)

/// One generated token together with the model's candidate distribution at
/// that position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenObservation {
    /// Surface form of the chosen token.
    pub text: String,
    /// Top candidates as (token text, probability), descending by
    /// probability. The chosen token is always present.
    pub top_candidates: Vec<(String, f64)>,
    /// 0-based ordinal of this token in its stream.
    pub position: usize,
}

impl TokenObservation {
    /// Builds an observation from raw candidates: clamps probabilities to
    /// the floor, inserts the chosen token when the API omitted it from the
    /// top-K, and sorts descending.
    pub fn normalized(
        text: String,
        mut candidates: Vec<(String, f64)>,
        chosen_probability: f64,
        position: usize,
    ) -> Self {
        for c in &mut candidates {
            c.1 = clamp_probability(c.1);
        }
        if !candidates.iter().any(|(t, _)| *t == text) {
            candidates.push((text.clone(), clamp_probability(chosen_probability)));
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("probabilities are finite"));
        Self {
            text,
            top_candidates: candidates,
            position,
        }
    }

    /// Checks the observation invariants: candidates non-empty and sorted
    /// descending, all probabilities in (0, 1], chosen token present.
    pub fn validate(&self) -> Result<()> {
        if self.top_candidates.is_empty() {
            return Err(Error::invalid("token observation has no candidates"));
        }
        let mut prev = f64::INFINITY;
        for (t, p) in &self.top_candidates {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::invalid(format!(
                    "candidate {t:?} probability {p} out of (0,1]"
                )));
            }
            if *p > prev {
                return Err(Error::invalid("candidate probabilities not descending"));
            }
            prev = *p;
        }
        if !self.top_candidates.iter().any(|(t, _)| *t == self.text) {
            return Err(Error::invalid(format!(
                "chosen token {:?} missing from candidates",
                self.text
            )));
        }
        Ok(())
    }

    /// The candidate distribution for entropy scoring (renormalized).
    pub fn distribution(&self) -> Result<TokenDistribution<f64>> {
        TokenDistribution::new(self.top_candidates.iter().map(|(_, p)| *p).collect())
    }
}

/// Clamps a probability into `[PROBABILITY_FLOOR, 1]`.
pub fn clamp_probability(p: f64) -> f64 {
    if !p.is_finite() || p < PROBABILITY_FLOOR {
        PROBABILITY_FLOOR
    } else if p > 1.0 {
        1.0
    } else {
        p
    }
}

/// Converts an API log-probability to a probability with the floor
/// applied.
pub fn probability_from_logprob(logprob: f64) -> f64 {
    clamp_probability(logprob.exp())
}

/// Static description of a driver, echoed into session records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverInfo {
    /// "replay" or "live"; the recording wrapper reports its inner driver.
    pub kind: String,
    /// Model identifier when known.
    pub model: Option<String>,
    /// Top-K candidate count the driver requests or carries.
    pub top_k: Option<usize>,
    /// Whether the token source is a deterministic replay.
    pub replay: bool,
}

/// A request for one short auxiliary generation between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionRequest {
    /// 1-based index of the completed reasoning step being summarized.
    pub step_index: usize,
    /// The original question.
    pub question: String,
    /// Rendered prompt: the accumulated reasoning plus the answer-eliciting
    /// suffix.
    pub prompt: String,
    /// Generation cap for the auxiliary completion.
    pub max_tokens: usize,
}

/// The auxiliary generation: its tokens with candidate distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionResponse {
    pub tokens: Vec<TokenObservation>,
}

impl InductionResponse {
    /// The generated text (concatenation of token surfaces).
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// Uniform model access for one session: a main token stream plus
/// between-step auxiliary generations.
///
/// Implementations are single-session objects; run concurrent sessions on
/// separate driver instances (the live driver shares one HTTP client).
pub trait ModelDriver {
    /// Driver description for record-keeping.
    fn info(&self) -> DriverInfo;

    /// Starts the main reasoning stream for a question.
    fn open(&mut self, question: &str) -> Result<()>;

    /// Next token of the main stream; `None` at natural end of generation.
    fn next_token(&mut self) -> Result<Option<TokenObservation>>;

    /// Releases the main stream early (session exited before natural end).
    fn cancel_stream(&mut self) -> Result<()>;

    /// Runs one auxiliary generation. Must not disturb the main stream.
    fn induce(&mut self, request: &InductionRequest) -> Result<InductionResponse>;
}

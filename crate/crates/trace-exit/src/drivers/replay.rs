//! Deterministic file replay of a recorded session.
//!
//! A replay file is line-delimited JSON: a header line with metadata, then
//! one line per main-stream token, induction scripts keyed by step index,
//! and a trailer line. A missing trailer marks the recording as incomplete
//! (the recorder died mid-session); such files load only when explicitly
//! allowed. Replays are the token source for every test and for offline
//! parameter sweeps — one model run, many analyses.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stepper::{Segmenter, SegmenterConfig};

use super::{DriverInfo, InductionRequest, InductionResponse, ModelDriver, TokenObservation};

/// Schema tag carried by every replay file header.
pub const REPLAY_SCHEMA: &str = "trace-replay/1";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    schema: String,
    question: String,
    gold_answer: Option<String>,
    model: Option<String>,
    top_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptToken {
    text: String,
    top: Vec<(String, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BodyLine {
    Token {
        text: String,
        top: Vec<(String, f64)>,
    },
    Induction {
        step: usize,
        text: String,
        tokens: Vec<ScriptToken>,
    },
    End {
        cancelled_after_step: Option<usize>,
    },
}

/// A fully loaded, validated replay file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTrace {
    pub question: String,
    pub gold_answer: Option<String>,
    pub model: Option<String>,
    pub top_k: Option<usize>,
    /// Main-stream tokens in generation order.
    pub main_stream: Vec<TokenObservation>,
    /// Scripted auxiliary generations by 1-based step index.
    pub induction_responses: BTreeMap<usize, InductionResponse>,
    /// Set when the recorded session exited early: the last step whose
    /// induction was recorded before the stream was cancelled.
    pub cancelled_after_step: Option<usize>,
    /// Whether the trailer line was present.
    pub complete: bool,
    /// Where the trace was loaded from, for error messages.
    pub source_path: Option<String>,
}

impl ReplayTrace {
    /// Loads and validates a replay file, rejecting incomplete recordings.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, false)
    }

    /// Loads a replay file; `allow_partial` accepts a missing trailer.
    pub fn load_with(path: impl AsRef<Path>, allow_partial: bool) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let fail = |line: usize, message: String| Error::ReplayFormat {
            path: display.clone(),
            line,
            message,
        };
        let file = File::open(path).map_err(|e| {
            Error::Config(format!("cannot open replay file {display}: {e}"))
        })?;
        let reader = BufReader::new(file);

        let mut lines = reader.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| fail(1, "empty file; expected header line".into()))?;
        let first = first?;
        let header: HeaderLine = serde_json::from_str(&first)
            .map_err(|e| fail(1, format!("bad header: {e}")))?;
        if header.schema != REPLAY_SCHEMA {
            return Err(fail(
                1,
                format!(
                    "unsupported schema {:?} (expected {REPLAY_SCHEMA:?})",
                    header.schema
                ),
            ));
        }

        let mut trace = ReplayTrace {
            question: header.question,
            gold_answer: header.gold_answer,
            model: header.model,
            top_k: header.top_k,
            main_stream: Vec::new(),
            induction_responses: BTreeMap::new(),
            cancelled_after_step: None,
            complete: false,
            source_path: Some(display.clone()),
        };

        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if trace.complete {
                return Err(fail(lineno, "content after the end line".into()));
            }
            let body: BodyLine = serde_json::from_str(&line)
                .map_err(|e| fail(lineno, format!("bad line: {e}")))?;
            match body {
                BodyLine::Token { text, top } => {
                    if text.is_empty() {
                        return Err(fail(lineno, "main-stream token with empty text".into()));
                    }
                    let obs = TokenObservation {
                        text,
                        top_candidates: top,
                        position: trace.main_stream.len(),
                    };
                    obs.validate().map_err(|e| fail(lineno, e.to_string()))?;
                    trace.main_stream.push(obs);
                }
                BodyLine::Induction { step, text, tokens } => {
                    if step < 1 {
                        return Err(fail(lineno, "induction step index must be >= 1".into()));
                    }
                    if trace.induction_responses.contains_key(&step) {
                        return Err(fail(
                            lineno,
                            format!("duplicate induction script for step {step}"),
                        ));
                    }
                    let mut obs_tokens = Vec::with_capacity(tokens.len());
                    for (i, t) in tokens.into_iter().enumerate() {
                        if t.text.is_empty() {
                            return Err(fail(
                                lineno,
                                format!("induction token {i} has empty text"),
                            ));
                        }
                        let obs = TokenObservation {
                            text: t.text,
                            top_candidates: t.top,
                            position: i,
                        };
                        obs.validate().map_err(|e| fail(lineno, e.to_string()))?;
                        obs_tokens.push(obs);
                    }
                    let response = InductionResponse { tokens: obs_tokens };
                    if response.text() != text {
                        return Err(fail(
                            lineno,
                            format!(
                                "induction text does not match its tokens for step {step}"
                            ),
                        ));
                    }
                    trace.induction_responses.insert(step, response);
                }
                BodyLine::End {
                    cancelled_after_step,
                } => {
                    trace.cancelled_after_step = cancelled_after_step;
                    trace.complete = true;
                }
            }
        }
        if !trace.complete && !allow_partial {
            return Err(Error::Config(format!(
                "replay file {display} is incomplete (no end line); \
                 pass allow_partial to load it anyway"
            )));
        }
        Ok(trace)
    }

    /// Writes the trace in the versioned line format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = HeaderLine {
            schema: REPLAY_SCHEMA.to_string(),
            question: self.question.clone(),
            gold_answer: self.gold_answer.clone(),
            model: self.model.clone(),
            top_k: self.top_k,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for obs in &self.main_stream {
            let line = BodyLine::Token {
                text: obs.text.clone(),
                top: obs.top_candidates.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        for (step, response) in &self.induction_responses {
            let line = BodyLine::Induction {
                step: *step,
                text: response.text(),
                tokens: response
                    .tokens
                    .iter()
                    .map(|t| ScriptToken {
                        text: t.text.clone(),
                        top: t.top_candidates.clone(),
                    })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        if self.complete {
            let line = BodyLine::End {
                cancelled_after_step: self.cancelled_after_step,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Steps the segmenter would produce over the full main stream, so
    /// induction-script coverage can be checked before a session starts.
    pub fn expected_steps(&self, segmenter: &SegmenterConfig) -> Result<usize> {
        let mut seg = Segmenter::new(segmenter.clone())?;
        for obs in &self.main_stream {
            seg.feed(&obs.text)?;
        }
        Ok(seg.finalize()?.len())
    }

    /// Verifies that induction scripts cover steps `1..=needed`, where
    /// `needed` is the segmenter's step count capped by
    /// `cancelled_after_step` for early-exit recordings.
    pub fn validate_induction_coverage(&self, segmenter: &SegmenterConfig) -> Result<()> {
        let mut needed = self.expected_steps(segmenter)?;
        if let Some(cancelled) = self.cancelled_after_step {
            needed = needed.min(cancelled);
        }
        for step in 1..=needed {
            if !self.induction_responses.contains_key(&step) {
                let place = self.source_path.clone().unwrap_or_else(|| "<memory>".into());
                return Err(Error::Config(format!(
                    "replay trace {place} lacks an induction script for step {step}"
                )));
            }
        }
        Ok(())
    }
}

/// Convenience constructor for replay traces in tests and fixture
/// generators.
#[derive(Debug, Clone, Default)]
pub struct ReplayTraceBuilder {
    question: String,
    gold_answer: Option<String>,
    model: Option<String>,
    top_k: Option<usize>,
    main_stream: Vec<TokenObservation>,
    induction_responses: BTreeMap<usize, InductionResponse>,
    cancelled_after_step: Option<usize>,
}

impl ReplayTraceBuilder {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            ..Self::default()
        }
    }

    pub fn gold_answer(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    pub fn model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn top_k(mut self, top_k: usize) -> Self {
        self.top_k = Some(top_k);
        self
    }

    /// Appends a main-stream token with explicit candidates.
    pub fn token(mut self, text: &str, candidates: Vec<(String, f64)>) -> Self {
        let position = self.main_stream.len();
        self.main_stream.push(TokenObservation::normalized(
            text.to_string(),
            candidates,
            1.0,
            position,
        ));
        self
    }

    /// Appends a main-stream token whose distribution is a point mass.
    pub fn certain_token(self, text: &str) -> Self {
        let candidates = vec![(text.to_string(), 1.0)];
        self.token(text, candidates)
    }

    /// Scripts the auxiliary generation for a step from (text, candidates)
    /// pairs.
    pub fn induction(mut self, step: usize, tokens: Vec<(String, Vec<(String, f64)>)>) -> Self {
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(i, (text, candidates))| TokenObservation::normalized(text, candidates, 1.0, i))
            .collect();
        self.induction_responses
            .insert(step, InductionResponse { tokens });
        self
    }

    pub fn cancelled_after_step(mut self, step: usize) -> Self {
        self.cancelled_after_step = Some(step);
        self
    }

    pub fn build(self) -> ReplayTrace {
        ReplayTrace {
            question: self.question,
            gold_answer: self.gold_answer,
            model: self.model,
            top_k: self.top_k,
            main_stream: self.main_stream,
            induction_responses: self.induction_responses,
            cancelled_after_step: self.cancelled_after_step,
            complete: true,
            source_path: None,
        }
    }
}

/// Driver that replays a loaded trace; a per-session cursor makes replays
/// deterministic and repeatable.
#[derive(Debug, Clone)]
pub struct ReplayDriver {
    trace: Arc<ReplayTrace>,
    cursor: usize,
    opened: bool,
    cancelled: bool,
}

impl ReplayDriver {
    pub fn new(trace: Arc<ReplayTrace>) -> Self {
        Self {
            trace,
            cursor: 0,
            opened: false,
            cancelled: false,
        }
    }

    /// The backing trace.
    pub fn trace(&self) -> &ReplayTrace {
        &self.trace
    }
}

impl ModelDriver for ReplayDriver {
    fn info(&self) -> DriverInfo {
        DriverInfo {
            kind: "replay".to_string(),
            model: self.trace.model.clone(),
            top_k: self.trace.top_k,
            replay: true,
        }
    }

    fn open(&mut self, question: &str) -> Result<()> {
        if question != self.trace.question {
            return Err(Error::driver(
                format!(
                    "question mismatch: replay trace was recorded for {:?}",
                    self.trace.question
                ),
                None,
                false,
            ));
        }
        self.cursor = 0;
        self.opened = true;
        self.cancelled = false;
        Ok(())
    }

    fn next_token(&mut self) -> Result<Option<TokenObservation>> {
        if !self.opened {
            return Err(Error::usage("next_token before open"));
        }
        if self.cancelled || self.cursor >= self.trace.main_stream.len() {
            return Ok(None);
        }
        let obs = self.trace.main_stream[self.cursor].clone();
        self.cursor += 1;
        Ok(Some(obs))
    }

    fn cancel_stream(&mut self) -> Result<()> {
        self.cancelled = true;
        Ok(())
    }

    fn induce(&mut self, request: &InductionRequest) -> Result<InductionResponse> {
        self.trace
            .induction_responses
            .get(&request.step_index)
            .cloned()
            .ok_or_else(|| {
                Error::driver(
                    format!(
                        "replay trace has no induction script for step {}",
                        request.step_index
                    ),
                    Some(request.step_index),
                    false,
                )
            })
    }
}

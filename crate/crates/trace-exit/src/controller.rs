//! Session control: stream reasoning steps, induce answers between steps,
//! score the sliding window, and stop when the exit rule fires.
//!
//! One engine runs every policy so their records are directly comparable:
//!
//! * `trace` exits when the combined stability score of the leading
//!   answer reaches the threshold, and falls back to the last induced
//!   answer when the step budget runs out.
//! * `single_step` exits at the first step whose own confidence reaches
//!   the threshold (the noisy baseline the window method improves on).
//! * `vanilla` streams to natural completion and parses the full output —
//!   the token-cost denominator for compression rates.
//! * `fixed_budget` truncates the stream after a fixed token budget.
//! * `oracle` exits at the first step whose induced answer equals the
//!   gold label; replay-only, the upper bound for trade-off curves.
//!
//! Generation is cancelled the moment a session stops, and tokens that
//! were already delivered beyond the exit boundary are logged separately
//! rather than billed.

use std::collections::VecDeque;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drivers::{DriverInfo, ModelDriver};
use crate::error::{Error, Result};
use crate::induction::{canonicalize, induce, parse_answer, InductionPrompt};
use crate::scoring::{stability, StabilityReport, StepEvidence, WindowConfig};
use crate::stepper::Segmenter;
use crate::stepper::SegmenterConfig;

/// Version tag written into every session record.
pub const SESSION_SCHEMA_VERSION: u32 = 1;

/// Decision policy for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Trace,
    SingleStep,
    Vanilla,
    FixedBudget,
    Oracle,
}

impl Policy {
    /// Whether the policy runs an answer induction after each step.
    pub fn induces(self) -> bool {
        matches!(self, Policy::Trace | Policy::SingleStep | Policy::Oracle)
    }

    pub const ALL: [Policy; 5] = [
        Policy::Trace,
        Policy::SingleStep,
        Policy::Vanilla,
        Policy::FixedBudget,
        Policy::Oracle,
    ];
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trace" => Ok(Policy::Trace),
            "single_step" => Ok(Policy::SingleStep),
            "vanilla" => Ok(Policy::Vanilla),
            "fixed_budget" => Ok(Policy::FixedBudget),
            "oracle" => Ok(Policy::Oracle),
            other => Err(Error::config(format!(
                "unknown policy {other:?} (expected trace, single_step, vanilla, fixed_budget, or oracle)"
            ))),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Policy::Trace => "trace",
            Policy::SingleStep => "single_step",
            Policy::Vanilla => "vanilla",
            Policy::FixedBudget => "fixed_budget",
            Policy::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

/// Full configuration of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub policy: Policy,
    pub window: WindowConfig<f64>,
    pub segmenter: SegmenterConfig,
    pub prompt: InductionPrompt,
    /// Step budget: the stream is truncated before producing more steps,
    /// and reaching it triggers the fallback answer.
    pub max_steps: usize,
    /// Safety cap on main-stream tokens.
    pub max_total_tokens: usize,
    /// Token budget for the `fixed_budget` policy.
    pub fixed_budget_tokens: usize,
    /// On fallback, return the best-scoring window candidate instead of
    /// the last induced answer. Off by default: the last induced answer is
    /// the standard fallback.
    pub fallback_best_scoring: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Trace,
            window: WindowConfig::default(),
            segmenter: SegmenterConfig::default(),
            prompt: InductionPrompt::default(),
            max_steps: 32,
            max_total_tokens: 65_536,
            fixed_budget_tokens: 1_024,
            fallback_best_scoring: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.segmenter.validate()?;
        self.prompt.validate()?;
        if self.max_steps < 1 {
            return Err(Error::invalid("max_steps must be >= 1"));
        }
        if self.max_total_tokens < 1 {
            return Err(Error::invalid("max_total_tokens must be >= 1"));
        }
        if self.policy == Policy::FixedBudget && self.fixed_budget_tokens < 1 {
            return Err(Error::invalid("fixed_budget_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Why a session stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// Stability (or single-step confidence) reached the threshold.
    Threshold,
    /// The step budget was exhausted; fallback answer returned.
    MaxSteps,
    /// Generation ended on its own.
    StreamEnd,
    /// A token cap stopped the stream (safety cap or fixed budget).
    TokenCap,
    /// Oracle policy matched the gold answer.
    GoldMatch,
}

impl std::fmt::Display for ExitReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExitReason::Threshold => "threshold",
            ExitReason::MaxSteps => "max_steps",
            ExitReason::StreamEnd => "stream_end",
            ExitReason::TokenCap => "token_cap",
            ExitReason::GoldMatch => "gold_match",
        };
        f.write_str(s)
    }
}

/// The terminal decision of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    /// Step at which the session stopped (0 when no step completed).
    pub step_index: usize,
    /// True only for criterion-triggered exits (threshold / gold match).
    pub exited_early: bool,
    /// Canonical final answer, when any was obtained.
    pub final_answer: Option<String>,
    /// Score that triggered the exit: the stability score for `trace`,
    /// the step confidence for `single_step`; absent otherwise.
    pub trigger_score: Option<f64>,
    pub reason: ExitReason,
}

/// One completed step in a session record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub index: usize,
    /// Character range of the step in the accumulated text.
    pub char_range: Range<usize>,
    /// Main-stream tokens whose start falls in this step.
    pub token_count: usize,
    /// Marker that opened this step (`None` for the preamble step).
    pub opened_by: Option<String>,
    /// Induction outcome for this step; `None` when the policy does not
    /// induce or the session stopped before inducing here.
    pub evidence: Option<StepEvidence<f64>>,
    /// Window scores after this step, for inducting policies.
    pub stability: Option<StabilityReport<f64>>,
}

/// Complete, serializable account of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub question: String,
    /// Canonical gold label, when one was supplied to the run; lets
    /// analysis exports judge per-step correctness.
    pub gold_answer: Option<String>,
    pub driver: DriverInfo,
    /// The fully resolved configuration the session ran with.
    pub config: SessionConfig,
    pub steps: Vec<StepRecord>,
    pub decision: ExitDecision,
    /// Main-stream tokens belonging to steps up to the exit step.
    pub reasoning_tokens: usize,
    /// Tokens spent on auxiliary generations.
    pub induction_tokens: usize,
    /// Tokens delivered beyond the exit boundary before cancellation took
    /// effect; never billed.
    pub overrun_tokens: usize,
    pub duration_ms: u64,
    /// Driver failure that ended the session prematurely, when any.
    pub error: Option<String>,
}

impl SessionRecord {
    /// Reasoning plus induction tokens: the session's billable total.
    pub fn total_tokens(&self) -> usize {
        self.reasoning_tokens + self.induction_tokens
    }

    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn without_duration(&self) -> Self {
        let mut r = self.clone();
        r.duration_ms = 0;
        r
    }
}

/// Runs the window-stability policy.
pub fn run_trace(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
) -> Result<SessionRecord> {
    expect_policy(config, Policy::Trace)?;
    Engine::new(driver, question, config, None)?.run()
}

/// Runs the single-step confidence baseline.
pub fn run_single_step(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
) -> Result<SessionRecord> {
    expect_policy(config, Policy::SingleStep)?;
    Engine::new(driver, question, config, None)?.run()
}

/// Streams to natural completion with no early-exit machinery.
pub fn run_vanilla(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
) -> Result<SessionRecord> {
    expect_policy(config, Policy::Vanilla)?;
    Engine::new(driver, question, config, None)?.run()
}

/// Truncates the stream at a fixed token budget.
pub fn run_fixed_budget(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
) -> Result<SessionRecord> {
    expect_policy(config, Policy::FixedBudget)?;
    Engine::new(driver, question, config, None)?.run()
}

/// Exits at the first step that induces the gold answer. Requires a
/// replay-backed driver: the gold label belongs to recorded data.
pub fn run_oracle(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
    gold_answer: &str,
) -> Result<SessionRecord> {
    expect_policy(config, Policy::Oracle)?;
    if !driver.info().replay {
        return Err(Error::usage(
            "the oracle policy runs only on replay-backed drivers",
        ));
    }
    Engine::new(driver, question, config, Some(gold_answer))?.run()
}

/// Dispatches on `config.policy`. `gold_answer` is required for oracle;
/// for every other policy it is optional and, when given, is recorded in
/// the session record so analysis exports can judge correctness.
pub fn run_policy(
    driver: &mut dyn ModelDriver,
    question: &str,
    config: &SessionConfig,
    gold_answer: Option<&str>,
) -> Result<SessionRecord> {
    if config.policy == Policy::Oracle {
        let gold = gold_answer
            .ok_or_else(|| Error::usage("the oracle policy needs a gold answer"))?;
        run_oracle(driver, question, config, gold)
    } else {
        Engine::new(driver, question, config, gold_answer)?.run()
    }
}

/// The segmenter configuration a session actually runs with: for
/// inducing policies the step budget is enforced on the stream itself by
/// truncating before the boundary that would open one step too many.
/// Offline re-scoring must use the same configuration to stay equivalent.
pub(crate) fn effective_segmenter(config: &SessionConfig) -> SegmenterConfig {
    let mut seg_config = config.segmenter.clone();
    if config.policy.induces() {
        let limit = seg_config
            .match_limit
            .map_or(config.max_steps, |m| m.min(config.max_steps));
        seg_config.match_limit = Some(limit);
    }
    seg_config
}

fn expect_policy(config: &SessionConfig, expected: Policy) -> Result<()> {
    if config.policy != expected {
        return Err(Error::usage(format!(
            "config.policy is {} but {expected} was invoked",
            config.policy
        )));
    }
    Ok(())
}

struct Engine<'a> {
    driver: &'a mut dyn ModelDriver,
    question: &'a str,
    config: &'a SessionConfig,
    gold_canonical: Option<String>,
    segmenter: Segmenter,
    window: VecDeque<StepEvidence<f64>>,
    evidences: Vec<StepEvidence<f64>>,
    reports: Vec<StabilityReport<f64>>,
    completed_steps: usize,
    delivered_tokens: usize,
    induction_tokens: usize,
    last_induced: Option<String>,
    exit: Option<ExitDecision>,
    error: Option<String>,
    hit_token_cap: bool,
}

impl<'a> Engine<'a> {
    fn new(
        driver: &'a mut dyn ModelDriver,
        question: &'a str,
        config: &'a SessionConfig,
        gold_answer: Option<&str>,
    ) -> Result<Self> {
        config.validate()?;
        let seg_config = effective_segmenter(config);
        Ok(Self {
            driver,
            question,
            config,
            gold_canonical: gold_answer.map(canonicalize),
            segmenter: Segmenter::new(seg_config)?,
            window: VecDeque::new(),
            evidences: Vec::new(),
            reports: Vec::new(),
            completed_steps: 0,
            delivered_tokens: 0,
            induction_tokens: 0,
            last_induced: None,
            exit: None,
            error: None,
            hit_token_cap: false,
        })
    }

    fn run(mut self) -> Result<SessionRecord> {
        let started = Instant::now();
        self.driver.open(self.question)?;

        let token_budget = match self.config.policy {
            Policy::FixedBudget => self
                .config
                .fixed_budget_tokens
                .min(self.config.max_total_tokens),
            _ => self.config.max_total_tokens,
        };

        let mut natural_end = false;
        while self.exit.is_none() && self.error.is_none() {
            if self.delivered_tokens >= token_budget {
                self.hit_token_cap = true;
                break;
            }
            let obs = match self.driver.next_token() {
                Ok(obs) => obs,
                Err(Error::Driver { message, .. }) => {
                    self.error = Some(format!("main stream: {message}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            let Some(obs) = obs else {
                natural_end = true;
                break;
            };
            self.delivered_tokens += 1;
            let events = self.segmenter.feed(&obs.text)?;
            for event in events {
                if self.exit.is_some() || self.error.is_some() {
                    break;
                }
                self.process_step(event.char_position)?;
            }
            if self.segmenter.is_truncated() {
                break;
            }
        }
        if !natural_end {
            self.driver.cancel_stream()?;
        }

        let all_steps = self.segmenter.finalize()?;

        // Boundaries confirmed only at end of stream, plus the trailing
        // step, still need their inductions.
        if self.config.policy.induces() {
            while self.exit.is_none()
                && self.error.is_none()
                && self.completed_steps < all_steps.len()
            {
                let end = all_steps[self.completed_steps].char_range.end;
                self.process_step(end)?;
            }
        }

        Ok(self.assemble(all_steps, started))
    }

    /// Handles one completed step: induce, update the window, score, and
    /// apply the policy's exit rule.
    fn process_step(&mut self, boundary_end: usize) -> Result<()> {
        let t = self.completed_steps + 1;
        self.completed_steps = t;
        if !self.config.policy.induces() {
            return Ok(());
        }
        let context = self.segmenter.text_prefix(boundary_end);
        let induced = match induce(self.driver, self.question, &context, &self.config.prompt, t) {
            Ok(induced) => induced,
            Err(Error::Driver { message, step, .. }) => {
                let at = step.unwrap_or(t);
                self.error = Some(format!("induction at step {at}: {message}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        self.induction_tokens += induced.token_cost;
        let evidence = induced.evidence(t)?;
        if let Some(answer) = &evidence.answer {
            self.last_induced = Some(answer.clone());
        }
        self.window.push_back(evidence.clone());
        if self.window.len() > self.config.window.k {
            self.window.pop_front();
        }
        let report = stability(self.window.make_contiguous(), &self.config.window)?;

        match self.config.policy {
            Policy::Trace => {
                if report.exit {
                    self.exit = Some(ExitDecision {
                        step_index: t,
                        exited_early: true,
                        final_answer: report.selected.clone(),
                        trigger_score: report.selected_score(),
                        reason: ExitReason::Threshold,
                    });
                }
            }
            Policy::SingleStep => {
                if let (Some(answer), Some(c)) = (&evidence.answer, evidence.confidence_value()) {
                    if c >= self.config.window.tau {
                        self.exit = Some(ExitDecision {
                            step_index: t,
                            exited_early: true,
                            final_answer: Some(answer.clone()),
                            trigger_score: Some(c),
                            reason: ExitReason::Threshold,
                        });
                    }
                }
            }
            Policy::Oracle => {
                if evidence.answer.as_deref() == self.gold_canonical.as_deref() {
                    self.exit = Some(ExitDecision {
                        step_index: t,
                        exited_early: true,
                        final_answer: evidence.answer.clone(),
                        trigger_score: None,
                        reason: ExitReason::GoldMatch,
                    });
                }
            }
            Policy::Vanilla | Policy::FixedBudget => {}
        }

        self.evidences.push(evidence);
        self.reports.push(report);
        Ok(())
    }

    fn assemble(
        self,
        all_steps: Vec<crate::stepper::ReasoningStep>,
        started: Instant,
    ) -> SessionRecord {
        let events: Vec<String> = self
            .segmenter
            .events()
            .iter()
            .map(|e| e.marker.clone())
            .collect();

        let induces = self.config.policy.induces();
        let decision = match self.exit {
            Some(d) => d,
            None => {
                let reason = if induces && self.segmenter.is_truncated() {
                    ExitReason::MaxSteps
                } else if self.hit_token_cap {
                    ExitReason::TokenCap
                } else {
                    ExitReason::StreamEnd
                };
                let final_answer = match self.config.policy {
                    Policy::Vanilla | Policy::FixedBudget => {
                        parse_answer(&self.segmenter.full_text())
                    }
                    _ if self.config.fallback_best_scoring => self
                        .reports
                        .last()
                        .and_then(|r| r.selected.clone())
                        .or(self.last_induced),
                    _ => self.last_induced,
                };
                ExitDecision {
                    step_index: if induces {
                        self.completed_steps
                    } else {
                        all_steps.len()
                    },
                    exited_early: false,
                    final_answer,
                    trigger_score: None,
                    reason,
                }
            }
        };

        // Inducing policies keep only the steps up to the stopping point;
        // the rest of the stream is overrun. Non-inducing policies keep
        // every step they streamed.
        let kept = if induces {
            decision.step_index.min(all_steps.len())
        } else {
            all_steps.len()
        };
        let steps: Vec<StepRecord> = all_steps
            .iter()
            .take(kept)
            .map(|s| StepRecord {
                index: s.index,
                char_range: s.char_range.clone(),
                token_count: s.token_count,
                opened_by: if s.index >= 2 {
                    events.get(s.index - 2).cloned()
                } else {
                    None
                },
                evidence: self.evidences.get(s.index - 1).cloned(),
                stability: self.reports.get(s.index - 1).cloned(),
            })
            .collect();

        let reasoning_tokens: usize = steps.iter().map(|s| s.token_count).sum();
        SessionRecord {
            schema_version: SESSION_SCHEMA_VERSION,
            question: self.question.to_string(),
            gold_answer: self.gold_canonical,
            driver: self.driver.info(),
            config: self.config.clone(),
            steps,
            decision,
            reasoning_tokens,
            induction_tokens: self.induction_tokens,
            overrun_tokens: self.delivered_tokens - reasoning_tokens.min(self.delivered_tokens),
            duration_ms: started.elapsed().as_millis() as u64,
            error: self.error,
        }
    }
}

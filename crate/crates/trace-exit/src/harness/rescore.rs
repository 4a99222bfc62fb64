//! Offline re-scoring of recorded traces.
//!
//! Parameter sweeps and trade-off curves explore many (τ, α, k) settings
//! over the same recordings. Re-running full sessions would re-read every
//! trace per setting; instead each trace is *prepared* once — segmented
//! and its recorded inductions interpreted into per-step evidence — and
//! the cheap decision loop is then simulated per setting. The simulation
//! mirrors the session engine exactly, and a test pins the equivalence.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{effective_segmenter, ExitReason, Policy, SessionConfig};
use crate::drivers::ReplayTrace;
use crate::error::{Error, Result};
use crate::induction::{canonicalize, interpret_response};
use crate::scoring::{stability, StepEvidence, WindowConfig};
use crate::stepper::Segmenter;

use super::{aggregate, judge, EvalMetrics, Evaluator, ItemOutcome};

/// One sweep result: the metrics obtained at one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub metrics: EvalMetrics,
}

/// One trade-off point: tokens versus accuracy for a policy at a
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub policy: Policy,
    pub tau: f64,
    pub mean_tokens: f64,
    pub accuracy: f64,
}

/// One reasoning step with its recorded induction, ready to re-score.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub token_count: usize,
    pub induction_cost: usize,
    pub evidence: StepEvidence<f64>,
}

/// A recorded trace reduced to what the decision loop consumes.
#[derive(Debug, Clone)]
pub struct PreparedTrace {
    pub id: String,
    pub gold_canonical: String,
    pub steps: Vec<PreparedStep>,
    /// The step budget truncated the stream.
    pub truncated: bool,
    /// The token cap stopped the stream.
    pub hit_token_cap: bool,
    /// What a vanilla run on this trace bills.
    pub vanilla_tokens: usize,
}

/// Segments a recorded stream and interprets every recorded induction,
/// mirroring how a session with this `config` would see the trace.
pub fn prepare(
    id: &str,
    gold_answer: &str,
    trace: &ReplayTrace,
    config: &SessionConfig,
) -> Result<PreparedTrace> {
    if !config.policy.induces() {
        return Err(Error::usage(
            "re-scoring applies to inducing policies (trace, single_step, oracle)",
        ));
    }
    config.validate()?;
    let mut segmenter = Segmenter::new(effective_segmenter(config))?;
    let budget = config.max_total_tokens;
    let mut fed = 0usize;
    let mut hit_token_cap = false;
    for obs in &trace.main_stream {
        if fed >= budget {
            hit_token_cap = true;
            break;
        }
        segmenter.feed(&obs.text)?;
        fed += 1;
        if segmenter.is_truncated() {
            break;
        }
    }
    if !segmenter.is_truncated() && fed >= budget {
        hit_token_cap = true;
    }
    let steps = segmenter.finalize()?;
    let truncated = segmenter.is_truncated();

    let mut prepared = Vec::with_capacity(steps.len());
    for step in &steps {
        let response = trace.induction_responses.get(&step.index).ok_or_else(|| {
            Error::config(format!(
                "trace {id:?} lacks the induction for step {}; re-scoring needs full coverage",
                step.index
            ))
        })?;
        let induced = interpret_response(response, &config.prompt)?;
        prepared.push(PreparedStep {
            token_count: step.token_count,
            induction_cost: induced.token_cost,
            evidence: induced.evidence(step.index)?,
        });
    }
    Ok(PreparedTrace {
        id: id.to_string(),
        gold_canonical: canonicalize(gold_answer),
        steps: prepared,
        truncated,
        hit_token_cap,
        vanilla_tokens: trace.main_stream.len().min(budget),
    })
}

/// Outcome of one simulated decision loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub exit_step: usize,
    pub exited_early: bool,
    pub final_answer: Option<String>,
    pub trigger_score: Option<f64>,
    pub reason: ExitReason,
    pub reasoning_tokens: usize,
    pub induction_tokens: usize,
}

impl SimOutcome {
    pub(crate) fn into_outcome(self, id: &str, gold_canonical: &str, numeric: bool) -> ItemOutcome {
        ItemOutcome {
            id: id.to_string(),
            correct: judge(self.final_answer.as_deref(), gold_canonical, numeric),
            final_answer: self.final_answer,
            exit_step: self.exit_step,
            exited_early: self.exited_early,
            reason: self.reason,
            reasoning_tokens: self.reasoning_tokens,
            induction_tokens: self.induction_tokens,
            total_tokens: self.reasoning_tokens + self.induction_tokens,
            error: None,
        }
    }
}

/// Replays the decision loop over prepared evidence. Equivalent to
/// running a fresh session with the same settings on the same trace.
pub fn simulate(
    prepared: &PreparedTrace,
    policy: Policy,
    window_config: &WindowConfig<f64>,
    fallback_best_scoring: bool,
) -> Result<SimOutcome> {
    if !policy.induces() {
        return Err(Error::usage(
            "re-scoring applies to inducing policies (trace, single_step, oracle)",
        ));
    }
    window_config.validate()?;
    let mut window: VecDeque<StepEvidence<f64>> = VecDeque::new();
    let mut last_induced: Option<String> = None;
    let mut last_report = None;
    let mut exit: Option<(usize, Option<String>, Option<f64>, ExitReason)> = None;

    for (i, step) in prepared.steps.iter().enumerate() {
        let t = i + 1;
        if let Some(answer) = &step.evidence.answer {
            last_induced = Some(answer.clone());
        }
        window.push_back(step.evidence.clone());
        if window.len() > window_config.k {
            window.pop_front();
        }
        let report = stability(window.make_contiguous(), window_config)?;
        match policy {
            Policy::Trace => {
                if report.exit {
                    exit = Some((
                        t,
                        report.selected.clone(),
                        report.selected_score(),
                        ExitReason::Threshold,
                    ));
                }
            }
            Policy::SingleStep => {
                if let (Some(answer), Some(c)) =
                    (&step.evidence.answer, step.evidence.confidence_value())
                {
                    if c >= window_config.tau {
                        exit = Some((t, Some(answer.clone()), Some(c), ExitReason::Threshold));
                    }
                }
            }
            Policy::Oracle => {
                if step.evidence.answer.as_deref() == Some(prepared.gold_canonical.as_str()) {
                    exit = Some((t, step.evidence.answer.clone(), None, ExitReason::GoldMatch));
                }
            }
            Policy::Vanilla | Policy::FixedBudget => unreachable!("checked above"),
        }
        last_report = Some(report);
        if exit.is_some() {
            break;
        }
    }

    let (exit_step, final_answer, trigger_score, reason, exited_early) = match exit {
        Some((t, answer, score, reason)) => (t, answer, score, reason, true),
        None => {
            let reason = if prepared.truncated {
                ExitReason::MaxSteps
            } else if prepared.hit_token_cap {
                ExitReason::TokenCap
            } else {
                ExitReason::StreamEnd
            };
            let answer = if fallback_best_scoring {
                last_report
                    .as_ref()
                    .and_then(|r| r.selected.clone())
                    .or(last_induced)
            } else {
                last_induced
            };
            (prepared.steps.len(), answer, None, reason, false)
        }
    };
    Ok(SimOutcome {
        exit_step,
        exited_early,
        final_answer,
        trigger_score,
        reason,
        reasoning_tokens: prepared.steps[..exit_step].iter().map(|s| s.token_count).sum(),
        induction_tokens: prepared.steps[..exit_step]
            .iter()
            .map(|s| s.induction_cost)
            .sum(),
    })
}

/// The window parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    Alpha,
    K,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepAxis::Tau),
            "alpha" => Ok(SweepAxis::Alpha),
            "k" => Ok(SweepAxis::K),
            other => Err(Error::config(format!(
                "unknown sweep axis {other:?} (expected tau, alpha, or k)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Alpha => "alpha",
            SweepAxis::K => "k",
        })
    }
}

fn apply_axis(base: &WindowConfig<f64>, axis: SweepAxis, value: f64) -> Result<WindowConfig<f64>> {
    let mut wc = *base;
    match axis {
        SweepAxis::Tau => wc.tau = value,
        SweepAxis::Alpha => wc.alpha = value,
        SweepAxis::K => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::usage(format!(
                    "k values must be positive integers, got {value}"
                )));
            }
            wc.k = value as usize;
        }
    }
    wc.validate()?;
    Ok(wc)
}

impl Evaluator {
    /// Prepares every item's trace once for re-scoring.
    pub fn prepare_all(&self) -> Result<Vec<PreparedTrace>> {
        let config = self.config().clone();
        self.in_pool(|| {
            self.set()
                .items
                .par_iter()
                .map(|item| {
                    let path = item.replay.as_ref().ok_or_else(|| {
                        Error::usage(format!(
                            "problem {:?} has no replay path; re-scoring needs recordings",
                            item.id
                        ))
                    })?;
                    let trace = ReplayTrace::load(path)?;
                    prepare(&item.id, &item.answer, &trace, &config)
                })
                .collect()
        })
    }

    /// One metrics row per swept value, all from a single pass over the
    /// recordings; no model calls are repeated across values.
    pub fn sweep(&self, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
        if values.is_empty() {
            return Err(Error::usage("sweep needs at least one value"));
        }
        let policy = self.config().policy;
        let prepared = self.prepare_all()?;
        let vanilla_mean = vanilla_mean_tokens(&prepared);
        values
            .iter()
            .map(|&value| {
                let wc = apply_axis(&self.config().window, axis, value)?;
                let metrics = self.rescore_metrics(&prepared, policy, &wc, Some(vanilla_mean))?;
                Ok(SweepRow {
                    axis,
                    value,
                    metrics,
                })
            })
            .collect()
    }

    /// Accuracy/token points per policy per threshold, for trade-off
    /// plots. Oracle points do not depend on the threshold; they are
    /// still emitted per value so every curve has the same shape.
    pub fn tradeoff_curve(
        &self,
        policies: &[Policy],
        tau_values: &[f64],
    ) -> Result<Vec<CurvePoint>> {
        if tau_values.is_empty() {
            return Err(Error::usage("trade-off curve needs at least one threshold"));
        }
        if policies.is_empty() {
            return Err(Error::usage("trade-off curve needs at least one policy"));
        }
        let prepared = self.prepare_all()?;
        let mut points = Vec::with_capacity(policies.len() * tau_values.len());
        for &policy in policies {
            for &tau in tau_values {
                let wc = apply_axis(&self.config().window, SweepAxis::Tau, tau)?;
                let metrics = self.rescore_metrics(&prepared, policy, &wc, None)?;
                points.push(CurvePoint {
                    policy,
                    tau,
                    mean_tokens: metrics.mean_tokens,
                    accuracy: metrics.accuracy,
                });
            }
        }
        Ok(points)
    }

    fn rescore_metrics(
        &self,
        prepared: &[PreparedTrace],
        policy: Policy,
        window_config: &WindowConfig<f64>,
        vanilla_mean: Option<f64>,
    ) -> Result<EvalMetrics> {
        let fallback_best = self.config().fallback_best_scoring;
        let outcomes: Vec<ItemOutcome> = prepared
            .iter()
            .map(|p| {
                let sim = simulate(p, policy, window_config, fallback_best)?;
                Ok(sim.into_outcome(&p.id, &p.gold_canonical, self.numeric()))
            })
            .collect::<Result<_>>()?;
        Ok(aggregate(policy, outcomes, self.numeric(), vanilla_mean))
    }
}

fn vanilla_mean_tokens(prepared: &[PreparedTrace]) -> f64 {
    let total: usize = prepared.iter().map(|p| p.vanilla_tokens).sum();
    total as f64 / prepared.len() as f64
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::super::testutil::{save_trace, scripted_trace};
    use super::super::{ProblemItem, ProblemSet};
    use super::*;
    use crate::controller::run_policy;
    use crate::drivers::ReplayDriver;
    use std::sync::Arc;

    fn fast_config(policy: Policy) -> SessionConfig {
        let mut c = SessionConfig {
            policy,
            ..SessionConfig::default()
        };
        c.segmenter.scan_interval_tokens = 1;
        c
    }

    fn demo_traces() -> Vec<(String, String, ReplayTrace)> {
        vec![
            (
                "stable".into(),
                "42".into(),
                scripted_trace("q stable", "42", &[("42", 1.0); 6]),
            ),
            (
                "spike".into(),
                "7".into(),
                scripted_trace(
                    "q spike",
                    "7",
                    &[("3", 1.0), ("5", 0.5), ("7", 0.9), ("7", 0.9), ("7", 0.9), ("7", 0.9)],
                ),
            ),
            (
                "wander".into(),
                "1".into(),
                scripted_trace(
                    "q wander",
                    "1",
                    &[("2", 0.5), ("3", 0.5), ("4", 0.5), ("1", 0.6), ("5", 0.5)],
                ),
            ),
        ]
    }

    /// The core guarantee: simulating prepared evidence equals running a
    /// fresh session on the same trace, for every policy and setting.
    #[test]
    fn simulation_matches_fresh_session_runs() {
        for policy in [Policy::Trace, Policy::SingleStep, Policy::Oracle] {
            for tau in [0.3, 0.5, 0.8, 0.95] {
                for (id, gold, trace) in demo_traces() {
                    let mut config = fast_config(policy);
                    config.window.tau = tau;
                    let prepared = prepare(&id, &gold, &trace, &config).unwrap();
                    let sim = simulate(
                        &prepared,
                        policy,
                        &config.window,
                        config.fallback_best_scoring,
                    )
                    .unwrap();

                    let question = trace.question.clone();
                    let mut driver = ReplayDriver::new(Arc::new(trace));
                    let record =
                        run_policy(&mut driver, &question, &config, Some(&gold)).unwrap();

                    assert_eq!(sim.exit_step, record.decision.step_index, "{id} τ={tau}");
                    assert_eq!(sim.exited_early, record.decision.exited_early);
                    assert_eq!(sim.final_answer, record.decision.final_answer);
                    assert_eq!(sim.trigger_score, record.decision.trigger_score);
                    assert_eq!(sim.reason, record.decision.reason);
                    assert_eq!(sim.reasoning_tokens, record.reasoning_tokens);
                    assert_eq!(sim.induction_tokens, record.induction_tokens);
                }
            }
        }
    }

    fn demo_evaluator(dir: &Path, policy: Policy) -> Evaluator {
        let mut items = Vec::new();
        for (id, gold, trace) in demo_traces() {
            let path = save_trace(&trace, dir, &format!("{id}.jsonl"));
            items.push(ProblemItem {
                id: id.clone(),
                question: trace.question.clone(),
                answer: gold.clone(),
                replay: Some(path),
            });
        }
        Evaluator::new(ProblemSet::new(items).unwrap(), fast_config(policy))
    }

    #[test]
    fn sweep_produces_one_row_per_value_with_monotone_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let eval = demo_evaluator(dir.path(), Policy::Trace);
        let rows = eval
            .sweep(SweepAxis::Tau, &[0.5, 0.7, 0.8, 0.9, 0.99])
            .unwrap();
        assert_eq!(rows.len(), 5);
        for pair in rows.windows(2) {
            assert!(
                pair[1].metrics.mean_tokens >= pair[0].metrics.mean_tokens,
                "mean tokens must not decrease as the threshold rises"
            );
        }
        // Re-scoring computes the vanilla denominator from the traces.
        assert!(rows[0].metrics.compression_rate.unwrap() <= 1.0);
    }

    #[test]
    fn sweep_rejects_empty_values_and_bad_k() {
        let dir = tempfile::tempdir().unwrap();
        let eval = demo_evaluator(dir.path(), Policy::Trace);
        assert!(eval.sweep(SweepAxis::Tau, &[]).is_err());
        assert!(eval.sweep(SweepAxis::K, &[2.5]).is_err());
        assert!(eval.sweep(SweepAxis::K, &[0.0]).is_err());
        let rows = eval.sweep(SweepAxis::K, &[2.0, 5.0]).unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn alpha_sweep_rows_come_from_one_pass() {
        let dir = tempfile::tempdir().unwrap();
        let eval = demo_evaluator(dir.path(), Policy::Trace);
        let rows = eval.sweep(SweepAxis::Alpha, &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.axis, SweepAxis::Alpha);
            assert_eq!(row.metrics.items.len(), 3);
        }
    }

    #[test]
    fn tradeoff_curve_orders_policies_as_designed() {
        let dir = tempfile::tempdir().unwrap();
        let eval = demo_evaluator(dir.path(), Policy::Trace);
        let points = eval
            .tradeoff_curve(
                &[Policy::Trace, Policy::SingleStep, Policy::Oracle],
                &[0.8],
            )
            .unwrap();
        assert_eq!(points.len(), 3);
        let by_policy = |p: Policy| points.iter().find(|c| c.policy == p).unwrap();
        // The spike trace fools single-step at step 1; the window policy
        // waits out the spike; the oracle is at least as accurate as both.
        let trace = by_policy(Policy::Trace);
        let single = by_policy(Policy::SingleStep);
        let oracle = by_policy(Policy::Oracle);
        assert!(trace.accuracy > single.accuracy);
        assert!(oracle.accuracy >= trace.accuracy);
    }

    #[test]
    fn oracle_curve_is_threshold_independent() {
        let dir = tempfile::tempdir().unwrap();
        let eval = demo_evaluator(dir.path(), Policy::Oracle);
        let points = eval
            .tradeoff_curve(&[Policy::Oracle], &[0.5, 0.8, 0.95])
            .unwrap();
        assert_eq!(points.len(), 3);
        assert!(points
            .windows(2)
            .all(|p| p[0].accuracy == p[1].accuracy && p[0].mean_tokens == p[1].mean_tokens));
    }

    #[test]
    fn prepare_requires_full_induction_coverage() {
        use crate::drivers::ReplayTraceBuilder;
        let trace = ReplayTraceBuilder::new("q")
            .certain_token("a ")
            .certain_token("Wait")
            .certain_token(" b ")
            .induction(1, vec![("1}".into(), vec![("1}".into(), 1.0)])])
            .build();
        let config = fast_config(Policy::Trace);
        let err = prepare("x", "1", &trace, &config).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }
}

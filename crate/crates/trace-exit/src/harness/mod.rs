//! Batch evaluation over problem sets: accuracy, token cost, and
//! compression metrics per policy, parameter sweeps by offline
//! re-scoring, trade-off curves, and analysis exports.

pub mod export;
pub mod rescore;

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{run_policy, ExitReason, Policy, SessionConfig, SessionRecord};
use crate::drivers::{EndpointConfig, LiveDriver, ModelDriver, ReplayDriver, ReplayTrace};
use crate::error::{Error, Result};
use crate::induction::{canonicalize, numerically_equal};

pub use export::{
    export_distributions, write_consistency, write_consistency_csv, write_curve, write_curve_csv,
    write_items, write_items_csv, write_metrics, write_metrics_csv, write_scores,
    write_scores_csv, write_sweep, write_sweep_csv, AnalysisExport, ConsistencyRow, ScoreKind,
    ScoreRow,
};
pub use rescore::{simulate, CurvePoint, PreparedTrace, SimOutcome, SweepAxis, SweepRow};

/// One problem: a question, its gold answer, and (for offline runs) the
/// recorded trace to replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemItem {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Path to a recorded trace; resolved relative to the set file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

/// A labeled evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub items: Vec<ProblemItem>,
}

impl ProblemSet {
    pub fn new(items: Vec<ProblemItem>) -> Result<Self> {
        let set = Self { items };
        set.validate()?;
        Ok(set)
    }

    /// Loads a JSONL file with one `{id, question, answer, replay?}`
    /// object per line. Replay paths are resolved relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open problem set {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut items = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut item: ProblemItem = serde_json::from_str(&line).map_err(|e| {
                Error::config(format!(
                    "{}:{}: invalid problem item: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if let Some(replay) = item.replay.take() {
                item.replay = Some(if replay.is_absolute() {
                    replay
                } else {
                    base.join(replay)
                });
            }
            items.push(item);
        }
        Self::new(items)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::invalid("problem set is empty"));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if item.id.is_empty() {
                return Err(Error::invalid("problem item with empty id"));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::invalid(format!("duplicate problem id {:?}", item.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Where evaluation sessions get their tokens.
#[derive(Debug, Clone)]
pub enum DriverMode {
    /// Each item replays its recorded trace (deterministic).
    Replay,
    /// Each item queries a live endpoint.
    Live(EndpointConfig),
}

/// Outcome of one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub correct: bool,
    pub final_answer: Option<String>,
    pub exit_step: usize,
    pub exited_early: bool,
    pub reason: ExitReason,
    pub reasoning_tokens: usize,
    pub induction_tokens: usize,
    /// Billable total: reasoning plus induction tokens.
    pub total_tokens: usize,
    pub error: Option<String>,
}

/// Aggregate metrics for one policy over one problem set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub policy: Policy,
    /// Fraction of items judged correct.
    pub accuracy: f64,
    /// Mean billable tokens per item (reasoning + induction).
    pub mean_tokens: f64,
    /// Mean tokens relative to the vanilla baseline on the same set;
    /// `None` when no baseline was available. Exactly 1.0 for vanilla.
    pub compression_rate: Option<f64>,
    /// Induction tokens as a fraction of all billable tokens.
    pub induction_ratio: f64,
    /// Whether the numeric-equivalence judge was active.
    pub numeric_judge: bool,
    pub items: Vec<ItemOutcome>,
}

impl EvalMetrics {
    /// The compression rate, or an explicit error when the vanilla
    /// baseline was never computed (never a silent NaN).
    pub fn require_compression_rate(&self) -> Result<f64> {
        self.compression_rate.ok_or(Error::MissingVanillaBaseline)
    }

    /// Computes metrics from already-run sessions (one record per item),
    /// judging each against its own recorded gold answer.
    ///
    /// Items are keyed by position since records carry no external id.
    /// Every record must carry a gold answer — accuracy over unlabeled
    /// sessions would be meaningless.
    pub fn from_records(
        policy: Policy,
        records: &[SessionRecord],
        numeric_judge: bool,
        vanilla_mean_tokens: Option<f64>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("metrics need at least one session record"));
        }
        let items = records
            .iter()
            .enumerate()
            .map(|(i, record)| {
                let gold = record.gold_answer.as_deref().ok_or_else(|| {
                    Error::invalid(format!(
                        "session record {} has no gold answer; metrics need labeled sessions",
                        i + 1
                    ))
                })?;
                Ok(outcome_from_record(
                    &format!("{:06}", i + 1),
                    record,
                    &canonicalize(gold),
                    numeric_judge,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate(policy, items, numeric_judge, vanilla_mean_tokens))
    }
}

/// Judges a canonical answer against a gold label.
pub(crate) fn judge(answer: Option<&str>, gold_canonical: &str, numeric: bool) -> bool {
    match answer {
        None => false,
        Some(a) => a == gold_canonical || (numeric && numerically_equal(a, gold_canonical)),
    }
}

/// Aggregates per-item outcomes into `EvalMetrics`, reducing in
/// ascending item-id order so results never depend on scheduling.
pub(crate) fn aggregate(
    policy: Policy,
    mut items: Vec<ItemOutcome>,
    numeric_judge: bool,
    vanilla_mean_tokens: Option<f64>,
) -> EvalMetrics {
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let n = items.len() as f64;
    let correct = items.iter().filter(|i| i.correct).count() as f64;
    let total: usize = items.iter().map(|i| i.total_tokens).sum();
    let induction: usize = items.iter().map(|i| i.induction_tokens).sum();
    let mean_tokens = total as f64 / n;
    let compression_rate = if policy == Policy::Vanilla {
        Some(1.0)
    } else {
        vanilla_mean_tokens.map(|v| mean_tokens / v)
    };
    EvalMetrics {
        policy,
        accuracy: correct / n,
        mean_tokens,
        compression_rate,
        induction_ratio: if total == 0 {
            0.0
        } else {
            induction as f64 / total as f64
        },
        numeric_judge,
        items,
    }
}

pub(crate) fn outcome_from_record(
    id: &str,
    record: &SessionRecord,
    gold_canonical: &str,
    numeric: bool,
) -> ItemOutcome {
    ItemOutcome {
        id: id.to_string(),
        correct: judge(record.decision.final_answer.as_deref(), gold_canonical, numeric),
        final_answer: record.decision.final_answer.clone(),
        exit_step: record.decision.step_index,
        exited_early: record.decision.exited_early,
        reason: record.decision.reason,
        reasoning_tokens: record.reasoning_tokens,
        induction_tokens: record.induction_tokens,
        total_tokens: record.total_tokens(),
        error: record.error.clone(),
    }
}

/// Runs policies over a problem set and aggregates metrics.
pub struct Evaluator {
    set: ProblemSet,
    base: SessionConfig,
    mode: DriverMode,
    numeric_judge: bool,
    workers: usize,
    vanilla_mean_tokens: Option<f64>,
}

impl Evaluator {
    pub fn new(set: ProblemSet, base: SessionConfig) -> Self {
        Self {
            set,
            base,
            mode: DriverMode::Replay,
            numeric_judge: false,
            workers: 0,
            vanilla_mean_tokens: None,
        }
    }

    /// Evaluate against a live endpoint instead of recordings.
    pub fn with_driver_mode(mut self, mode: DriverMode) -> Self {
        self.mode = mode;
        self
    }

    /// Turn on the numeric-equivalence judge ("998.5" counts as "1997/2").
    /// Off by default: judging is canonical string equality.
    pub fn with_numeric_judge(mut self, on: bool) -> Self {
        self.numeric_judge = on;
        self
    }

    /// Cap evaluation parallelism (0 = library default).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn set(&self) -> &ProblemSet {
        &self.set
    }

    pub fn config(&self) -> &SessionConfig {
        &self.base
    }

    pub(crate) fn numeric(&self) -> bool {
        self.numeric_judge
    }

    /// Seed the compression-rate denominator from a previous run.
    pub fn use_vanilla_baseline(&mut self, mean_tokens: f64) {
        self.vanilla_mean_tokens = Some(mean_tokens);
    }

    /// Mean vanilla tokens on this set, running the baseline on first use.
    pub fn vanilla_baseline(&mut self) -> Result<f64> {
        if let Some(v) = self.vanilla_mean_tokens {
            return Ok(v);
        }
        let metrics = self.evaluate(Policy::Vanilla)?;
        self.vanilla_mean_tokens = Some(metrics.mean_tokens);
        Ok(metrics.mean_tokens)
    }

    /// Runs `policy` over every item and aggregates. Deterministic for
    /// replay sets regardless of worker count.
    pub fn evaluate(&self, policy: Policy) -> Result<EvalMetrics> {
        let records = self.session_records(policy)?;
        let outcomes = self
            .set
            .items
            .iter()
            .zip(&records)
            .map(|(item, record)| {
                outcome_from_record(
                    &item.id,
                    record,
                    &canonicalize(&item.answer),
                    self.numeric_judge,
                )
            })
            .collect();
        Ok(aggregate(
            policy,
            outcomes,
            self.numeric_judge,
            self.vanilla_mean_tokens,
        ))
    }

    /// Runs `policy` over every item, returning full session records in
    /// item order (the input for analysis exports).
    pub fn session_records(&self, policy: Policy) -> Result<Vec<SessionRecord>> {
        let config = SessionConfig {
            policy,
            ..self.base.clone()
        };
        self.in_pool(|| {
            self.set
                .items
                .par_iter()
                .map(|item| self.run_item(item, &config))
                .collect()
        })
    }

    fn run_item(&self, item: &ProblemItem, config: &SessionConfig) -> Result<SessionRecord> {
        let mut driver: Box<dyn ModelDriver> = match &self.mode {
            DriverMode::Replay => {
                let path = item.replay.as_ref().ok_or_else(|| {
                    Error::usage(format!(
                        "problem {:?} has no replay path; replay-mode evaluation needs one",
                        item.id
                    ))
                })?;
                let trace = Arc::new(ReplayTrace::load(path)?);
                if config.policy.induces() {
                    trace.validate_induction_coverage(&config.segmenter)?;
                }
                Box::new(ReplayDriver::new(trace))
            }
            DriverMode::Live(endpoint) => Box::new(LiveDriver::new(endpoint.clone())?),
        };
        run_policy(driver.as_mut(), &item.question, config, Some(&item.answer))
    }

    pub(crate) fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        if self.workers == 0 {
            f()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
            pool.install(f)
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;

    use crate::drivers::{ReplayTrace, ReplayTraceBuilder};

    /// Replay trace with `answers[t-1]` induced after step `t`, each as a
    /// single box-continuation token with the given top probability.
    pub fn scripted_trace(
        question: &str,
        gold: &str,
        answers: &[(&str, f64)],
    ) -> ReplayTrace {
        let mut b = ReplayTraceBuilder::new(question).gold_answer(gold);
        for (i, (answer, p)) in answers.iter().enumerate() {
            if i > 0 {
                b = b.certain_token("Wait");
            }
            b = b.certain_token(" step ").certain_token("text ");
            for _ in 0..5 {
                b = b.certain_token("working it through ");
            }
            let tok = format!("{answer}}}");
            let candidates = if *p >= 1.0 {
                vec![(tok.clone(), 1.0)]
            } else {
                vec![(tok.clone(), *p), ("other".to_string(), 1.0 - *p)]
            };
            b = b.induction(i + 1, vec![(tok, candidates)]);
        }
        b = b.certain_token(" final \\boxed{").certain_token(&format!("{gold}}}"));
        b.build()
    }

    pub fn save_trace(trace: &ReplayTrace, dir: &Path, name: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        trace.save(&path).unwrap();
        path
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{save_trace, scripted_trace};
    use super::*;

    fn fast_config() -> SessionConfig {
        let mut c = SessionConfig::default();
        c.segmenter.scan_interval_tokens = 1;
        c
    }

    fn demo_set(dir: &Path) -> ProblemSet {
        // Three items: stable-correct, stable-wrong, unstable-correct.
        let traces = vec![
            ("p1", "42", vec![("42", 1.0); 5]),
            ("p2", "7", vec![("9", 1.0); 5]),
            (
                "p3",
                "5",
                vec![("1", 0.5), ("2", 0.5), ("3", 0.5), ("4", 0.5), ("5", 0.5)],
            ),
        ];
        let mut items = Vec::new();
        for (id, gold, answers) in traces {
            let trace = scripted_trace(&format!("question {id}"), gold, &answers);
            let path = save_trace(&trace, dir, &format!("{id}.jsonl"));
            items.push(ProblemItem {
                id: id.to_string(),
                question: format!("question {id}"),
                answer: gold.to_string(),
                replay: Some(path),
            });
        }
        ProblemSet::new(items).unwrap()
    }

    use std::path::Path;

    #[test]
    fn evaluate_counts_accuracy_and_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let set = demo_set(dir.path());
        let eval = Evaluator::new(set, fast_config());
        let m = eval.evaluate(Policy::Trace).unwrap();
        // p1 exits early on "42" (correct), p2 exits early on "9"
        // (wrong), p3 never stabilizes and falls back to "5" (correct).
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.items.len(), 3);
        assert!(m.items.iter().all(|i| i.total_tokens > 0));
        assert!(m.induction_ratio > 0.0);
        assert_eq!(m.compression_rate, None);
    }

    #[test]
    fn vanilla_compression_rate_is_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let set = demo_set(dir.path());
        let eval = Evaluator::new(set, fast_config());
        let m = eval.evaluate(Policy::Vanilla).unwrap();
        assert_eq!(m.compression_rate, Some(1.0));
        assert_eq!(m.induction_ratio, 0.0);
        // Vanilla reads the self-boxed tail and judges correct on p1/p3.
        assert!((m.accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compression_rate_needs_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let set = demo_set(dir.path());
        let mut eval = Evaluator::new(set, fast_config());
        let without = eval.evaluate(Policy::Trace).unwrap();
        assert!(without.require_compression_rate().is_err());
        let baseline = eval.vanilla_baseline().unwrap();
        assert!(baseline > 0.0);
        let with = eval.evaluate(Policy::Trace).unwrap();
        let cr = with.require_compression_rate().unwrap();
        assert!(cr > 0.0 && cr < 1.0, "early exit must compress: {cr}");
    }

    #[test]
    fn oracle_never_less_accurate_than_trace_here() {
        let dir = tempfile::tempdir().unwrap();
        let set = demo_set(dir.path());
        let eval = Evaluator::new(set, fast_config());
        let trace = eval.evaluate(Policy::Trace).unwrap();
        let oracle = eval.evaluate(Policy::Oracle).unwrap();
        assert!(oracle.accuracy >= trace.accuracy);
        assert!(oracle.mean_tokens <= trace.mean_tokens);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let set = demo_set(dir.path());
        let serial = Evaluator::new(set.clone(), fast_config())
            .with_workers(1)
            .evaluate(Policy::Trace)
            .unwrap();
        let parallel = Evaluator::new(set, fast_config())
            .with_workers(3)
            .evaluate(Policy::Trace)
            .unwrap();
        assert_eq!(
            serde_json::to_string(&serial).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
    }

    #[test]
    fn numeric_judge_accepts_equivalent_forms() {
        let dir = tempfile::tempdir().unwrap();
        let trace = scripted_trace("q", "998.5", &[("1997/2", 1.0); 5]);
        let path = save_trace(&trace, dir.path(), "t.jsonl");
        let set = ProblemSet::new(vec![ProblemItem {
            id: "i".into(),
            question: "q".into(),
            answer: "998.5".into(),
            replay: Some(path),
        }])
        .unwrap();
        let strict = Evaluator::new(set.clone(), fast_config());
        assert_eq!(strict.evaluate(Policy::Trace).unwrap().accuracy, 0.0);
        let lenient = Evaluator::new(set, fast_config()).with_numeric_judge(true);
        let m = lenient.evaluate(Policy::Trace).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.numeric_judge);
    }

    #[test]
    fn problem_set_rejects_duplicates_and_loads_relative_paths() {
        let dup = ProblemSet::new(vec![
            ProblemItem {
                id: "a".into(),
                question: "q".into(),
                answer: "1".into(),
                replay: None,
            },
            ProblemItem {
                id: "a".into(),
                question: "q".into(),
                answer: "2".into(),
                replay: None,
            },
        ]);
        assert!(dup.is_err());

        let dir = tempfile::tempdir().unwrap();
        let trace = scripted_trace("q", "1", &[("1", 1.0)]);
        save_trace(&trace, dir.path(), "rel.jsonl");
        let set_path = dir.path().join("set.jsonl");
        std::fs::write(
            &set_path,
            "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"1\",\"replay\":\"rel.jsonl\"}\n",
        )
        .unwrap();
        let set = ProblemSet::load(&set_path).unwrap();
        assert_eq!(set.items[0].replay.as_ref().unwrap(), &dir.path().join("rel.jsonl"));
    }
}

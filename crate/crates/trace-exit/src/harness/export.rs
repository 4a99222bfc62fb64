//! Analysis exports: raw step-level score rows and exit-consistency
//! rows, plus CSV writers for every harness product. Values are written
//! at full round-trip precision; binning and plotting happen downstream.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{Policy, SessionRecord};
use crate::error::{Error, Result};

use super::rescore::{CurvePoint, SweepRow};
use super::EvalMetrics;

/// Which score a distribution row carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// The per-step answer confidence the single-step baseline thresholds.
    SingleStepConfidence,
    /// The combined window stability score of the leading candidate.
    TraceStability,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::SingleStepConfidence => "single_step_confidence",
            ScoreKind::TraceStability => "trace_stability",
        })
    }
}

/// One step-level score observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub kind: ScoreKind,
    pub step_index: usize,
    pub value: f64,
    /// Whether the answer the score refers to equals the gold label.
    pub correct: bool,
}

/// How often the final answer appears in the window at exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub policy: Policy,
    pub consistency: f64,
}

/// Plot-ready raw rows extracted from session records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisExport {
    pub scores: Vec<ScoreRow>,
    pub exit_consistency: Vec<ConsistencyRow>,
    /// Records skipped because they carry no gold label.
    pub missing_gold: usize,
}

/// Extracts score-distribution and exit-consistency rows from records.
///
/// Per step, up to two score rows are emitted: the step's own answer
/// confidence (when an answer was parsed) and the window's leading
/// stability score (when any candidate was present), each marked correct
/// when the answer it scores equals the gold label. Per record with
/// inductions and a final answer, one exit-consistency row is emitted:
/// the count of window slots at exit holding the final answer, over the
/// full window size `k`.
pub fn export_distributions(records: &[SessionRecord]) -> AnalysisExport {
    let mut export = AnalysisExport::default();
    for record in records {
        let Some(gold) = record.gold_answer.as_deref() else {
            export.missing_gold += 1;
            continue;
        };
        for step in &record.steps {
            if let Some(evidence) = &step.evidence {
                if let (Some(answer), Some(c)) = (&evidence.answer, evidence.confidence_value()) {
                    export.scores.push(ScoreRow {
                        kind: ScoreKind::SingleStepConfidence,
                        step_index: step.index,
                        value: c,
                        correct: answer == gold,
                    });
                }
            }
            if let Some(report) = &step.stability {
                if let (Some(selected), Some(s)) = (&report.selected, report.selected_score()) {
                    export.scores.push(ScoreRow {
                        kind: ScoreKind::TraceStability,
                        step_index: step.index,
                        value: s,
                        correct: selected == gold,
                    });
                }
            }
        }
        if let Some(row) = exit_consistency(record) {
            export.exit_consistency.push(row);
        }
    }
    export
}

fn exit_consistency(record: &SessionRecord) -> Option<ConsistencyRow> {
    if !record.config.policy.induces() {
        return None;
    }
    let final_answer = record.decision.final_answer.as_deref()?;
    let t = record.decision.step_index;
    if t == 0 {
        return None;
    }
    let k = record.config.window.k;
    let matching = record
        .steps
        .iter()
        .filter(|s| s.index <= t && s.index + k > t)
        .filter(|s| {
            s.evidence
                .as_ref()
                .and_then(|e| e.answer.as_deref())
                .is_some_and(|a| a == final_answer)
        })
        .count();
    Some(ConsistencyRow {
        policy: record.config.policy,
        consistency: matching as f64 / k as f64,
    })
}

fn csv_failed(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv write failed: {other:?}")),
    }
}

/// Runs a path-based wrapper around a stream writer, attaching the path to
/// any failure.
fn to_path(
    path: &Path,
    write: impl FnOnce(std::fs::File) -> Result<()>,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    write(file).map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

fn opt_string<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one summary row per metrics object.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EvalMetrics]) -> Result<()> {
    to_path(path.as_ref(), |f| write_metrics(f, metrics))
}

/// Streams the metrics summary rows as CSV.
pub fn write_metrics<W: std::io::Write>(out: W, metrics: &[EvalMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "accuracy",
        "mean_tokens",
        "compression_rate",
        "induction_ratio",
        "numeric_judge",
        "items",
    ])
    .map_err(csv_failed)?;
    for m in metrics {
        w.write_record([
            m.policy.to_string(),
            m.accuracy.to_string(),
            m.mean_tokens.to_string(),
            opt_string(&m.compression_rate),
            m.induction_ratio.to_string(),
            m.numeric_judge.to_string(),
            m.items.len().to_string(),
        ])
        .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-item rows behind one metrics object.
pub fn write_items_csv(path: impl AsRef<Path>, metrics: &EvalMetrics) -> Result<()> {
    to_path(path.as_ref(), |f| write_items(f, metrics))
}

/// Streams the per-item rows as CSV.
pub fn write_items<W: std::io::Write>(out: W, metrics: &EvalMetrics) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "id",
        "correct",
        "final_answer",
        "exit_step",
        "exited_early",
        "reason",
        "reasoning_tokens",
        "induction_tokens",
        "total_tokens",
        "error",
    ])
    .map_err(csv_failed)?;
    for i in &metrics.items {
        w.write_record([
            i.id.clone(),
            i.correct.to_string(),
            opt_string(&i.final_answer),
            i.exit_step.to_string(),
            i.exited_early.to_string(),
            i.reason.to_string(),
            i.reasoning_tokens.to_string(),
            i.induction_tokens.to_string(),
            i.total_tokens.to_string(),
            opt_string(&i.error),
        ])
        .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per swept value.
pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    to_path(path.as_ref(), |f| write_sweep(f, rows))
}

/// Streams the sweep rows as CSV.
pub fn write_sweep<W: std::io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis",
        "value",
        "policy",
        "accuracy",
        "mean_tokens",
        "compression_rate",
        "induction_ratio",
    ])
    .map_err(csv_failed)?;
    for row in rows {
        w.write_record([
            row.axis.to_string(),
            row.value.to_string(),
            row.metrics.policy.to_string(),
            row.metrics.accuracy.to_string(),
            row.metrics.mean_tokens.to_string(),
            opt_string(&row.metrics.compression_rate),
            row.metrics.induction_ratio.to_string(),
        ])
        .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per trade-off point.
pub fn write_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    to_path(path.as_ref(), |f| write_curve(f, points))
}

/// Streams the trade-off points as CSV.
pub fn write_curve<W: std::io::Write>(out: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "tau", "mean_tokens", "accuracy"])
        .map_err(csv_failed)?;
    for p in points {
        w.write_record([
            p.policy.to_string(),
            p.tau.to_string(),
            p.mean_tokens.to_string(),
            p.accuracy.to_string(),
        ])
        .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per step-level score observation.
pub fn write_scores_csv(path: impl AsRef<Path>, export: &AnalysisExport) -> Result<()> {
    to_path(path.as_ref(), |f| write_scores(f, export))
}

/// Streams the score rows as CSV.
pub fn write_scores<W: std::io::Write>(out: W, export: &AnalysisExport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "step_index", "value", "correct"])
        .map_err(csv_failed)?;
    for s in &export.scores {
        w.write_record([
            s.kind.to_string(),
            s.step_index.to_string(),
            s.value.to_string(),
            s.correct.to_string(),
        ])
        .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per session's exit consistency.
pub fn write_consistency_csv(path: impl AsRef<Path>, export: &AnalysisExport) -> Result<()> {
    to_path(path.as_ref(), |f| write_consistency(f, export))
}

/// Streams the exit-consistency rows as CSV.
pub fn write_consistency<W: std::io::Write>(out: W, export: &AnalysisExport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "consistency"])
        .map_err(csv_failed)?;
    for c in &export.exit_consistency {
        w.write_record([c.policy.to_string(), c.consistency.to_string()])
            .map_err(csv_failed)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::testutil::scripted_trace;
    use super::*;
    use crate::controller::{run_policy, SessionConfig};
    use crate::drivers::ReplayDriver;

    fn record_for(answers: &[(&str, f64)], gold: &str, policy: Policy) -> SessionRecord {
        let trace = scripted_trace("q", gold, answers);
        let question = trace.question.clone();
        let mut config = SessionConfig {
            policy,
            ..SessionConfig::default()
        };
        config.segmenter.scan_interval_tokens = 1;
        let mut driver = ReplayDriver::new(Arc::new(trace));
        run_policy(&mut driver, &question, &config, Some(gold)).unwrap()
    }

    #[test]
    fn two_rows_per_step_when_answers_present() {
        let record = record_for(&[("3", 0.5), ("3", 0.5), ("3", 0.5)], "3", Policy::Trace);
        assert!(!record.decision.exited_early);
        let export = export_distributions(&[record]);
        assert_eq!(export.scores.len(), 3 * 2);
        assert_eq!(export.missing_gold, 0);
        assert!(export.scores.iter().all(|s| s.correct));
    }

    #[test]
    fn fully_stable_window_has_consistency_one() {
        let record = record_for(&[("42", 1.0); 6], "42", Policy::Trace);
        assert!(record.decision.exited_early);
        let export = export_distributions(&[record]);
        assert_eq!(export.exit_consistency.len(), 1);
        // Exit happens at step 4 with window (slots of k=5) holding four
        // matching answers: 4/5.
        assert!((export.exit_consistency[0].consistency - 0.8).abs() < 1e-12);
    }

    #[test]
    fn records_without_gold_are_counted_not_exported() {
        let trace = scripted_trace("q", "42", &[("42", 1.0); 5]);
        let question = trace.question.clone();
        let mut config = SessionConfig::default();
        config.segmenter.scan_interval_tokens = 1;
        let mut driver = ReplayDriver::new(Arc::new(trace));
        // No gold supplied to the run: the record cannot be judged.
        let record = run_policy(&mut driver, &question, &config, None).unwrap();
        let export = export_distributions(&[record]);
        assert_eq!(export.missing_gold, 1);
        assert!(export.scores.is_empty());
    }

    #[test]
    fn vanilla_records_produce_no_consistency_rows() {
        let record = record_for(&[("5", 1.0); 4], "5", Policy::Vanilla);
        let export = export_distributions(&[record]);
        assert!(export.exit_consistency.is_empty());
        assert!(export.scores.is_empty());
    }

    #[test]
    fn csv_writers_produce_readable_tables() {
        let dir = tempfile::tempdir().unwrap();
        let record = record_for(&[("42", 1.0); 6], "42", Policy::Trace);
        let export = export_distributions(&[record]);
        let scores = dir.path().join("scores.csv");
        let consistency = dir.path().join("consistency.csv");
        write_scores_csv(&scores, &export).unwrap();
        write_consistency_csv(&consistency, &export).unwrap();
        let scores_text = std::fs::read_to_string(&scores).unwrap();
        assert!(scores_text.starts_with("kind,step_index,value,correct\n"));
        assert!(scores_text.contains("trace_stability"));
        let consistency_text = std::fs::read_to_string(&consistency).unwrap();
        assert!(consistency_text.contains("trace,0.8"));
    }
}

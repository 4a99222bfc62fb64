//! Command-line interface: run one session, evaluate a problem set, sweep
//! parameters over recordings, segment a text file, or export analysis
//! rows.
//!
//! Settings resolve in precedence order: command-line flags override config
//! file values, which override built-in defaults. Every number printed here
//! comes from the same library calls a direct user would make; the CLI adds
//! only argument handling and formatting. API keys are never accepted as
//! flags or config values — the config names an environment variable and
//! the driver reads the key from the environment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use trace_exit::drivers::{
    EndpointConfig, LiveDriver, ModelDriver, RecordingDriver, ReplayDriver, ReplayTrace,
};
use trace_exit::harness::{
    export_distributions, write_consistency, write_consistency_csv, write_curve, write_curve_csv,
    write_items_csv, write_metrics, write_metrics_csv, write_scores, write_scores_csv,
    write_sweep, write_sweep_csv, DriverMode, Evaluator, ProblemSet, SweepAxis,
};
use trace_exit::{
    run_policy, Error, InductionPrompt, Policy, Result, SegmenterConfig, SessionConfig,
    SessionRecord, WindowConfig,
};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            if error.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Run(args) => cmd_run(args, &file),
        Command::Evaluate(args) => cmd_evaluate(args, &file).map(|()| ExitCode::SUCCESS),
        Command::Sweep(args) => cmd_sweep(args, &file).map(|()| ExitCode::SUCCESS),
        Command::Segment(args) => cmd_segment(args, &file).map(|()| ExitCode::SUCCESS),
        Command::Analyze(args) => cmd_analyze(args, &file).map(|()| ExitCode::SUCCESS),
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Early-exit control for multi-step reasoning sessions.
#[derive(Parser)]
#[command(name = "trace-exit", version, about)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session and print a one-line summary.
    Run(RunArgs),
    /// Evaluate one policy over a labeled problem set.
    Evaluate(EvaluateArgs),
    /// Re-score recorded sessions across parameter values.
    Sweep(SweepArgs),
    /// Split a text file into reasoning steps.
    Segment(SegmentArgs),
    /// Export score distributions, exit consistency, or trade-off curves.
    Analyze(AnalyzeArgs),
}

/// Session-shaping flags shared by every session-running command.
#[derive(Args, Clone, Default)]
struct SessionFlags {
    /// Exit policy: trace, single_step, vanilla, fixed_budget, or oracle.
    #[arg(long)]
    policy: Option<String>,
    /// Stability threshold for early exit.
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of answer consistency against confidence trajectory.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sliding-window size in steps.
    #[arg(long)]
    k: Option<usize>,
    /// Segmentation marker profile: default or gemini.
    #[arg(long)]
    profile: Option<String>,
    /// Tokens between marker scans.
    #[arg(long, value_name = "TOKENS")]
    scan_interval: Option<usize>,
    /// Maximum reasoning steps before fallback.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Hard cap on main-stream tokens.
    #[arg(long, value_name = "TOKENS")]
    max_total_tokens: Option<usize>,
    /// Token budget for the fixed_budget policy.
    #[arg(long, value_name = "TOKENS")]
    fixed_budget_tokens: Option<usize>,
}

/// Token-source flags shared by every session-running command.
#[derive(Args, Clone, Default)]
struct DriverFlags {
    /// Replay a recorded session from this file.
    #[arg(long, value_name = "FILE")]
    replay: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible endpoint (".../v1").
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Model identifier for live requests.
    #[arg(long)]
    model: Option<String>,
    /// Candidate count requested per token.
    #[arg(long, value_name = "N")]
    top_k: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// The question, or a path to a file whose contents are the question.
    /// Optional when --replay supplies the recorded question.
    question: Option<String>,
    /// Gold answer for judging and for the oracle policy.
    #[arg(long)]
    gold: Option<String>,
    /// Record the session to this replay file.
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
    /// Write the full session record as JSON to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    session: SessionFlags,
    #[command(flatten)]
    driver: DriverFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Problem-set manifest (JSONL).
    #[arg(long, value_name = "FILE")]
    set: PathBuf,
    /// Parallel sessions (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
    /// Judge numerically equal answers ("0.5" vs "1/2") as correct.
    #[arg(long)]
    numeric_judge: bool,
    /// Skip the vanilla baseline pass (compression rate stays empty).
    #[arg(long)]
    no_baseline: bool,
    /// Directory for metrics.csv, items_<policy>.csv, and metrics.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    session: SessionFlags,
    #[command(flatten)]
    driver: DriverFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Problem-set manifest (JSONL) with replay recordings.
    #[arg(long, value_name = "FILE")]
    set: PathBuf,
    /// Swept parameter: tau, alpha, or k.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. 0.7,0.8,0.9.
    #[arg(long)]
    values: String,
    /// Parallel trace preparation (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for sweep.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    session: SessionFlags,
}

#[derive(Args)]
struct SegmentArgs {
    /// UTF-8 text file to segment.
    file: PathBuf,
    /// Segmentation marker profile: default or gemini.
    #[arg(long)]
    profile: Option<String>,
    /// Tokens between marker scans (affects streaming only; offline
    /// segmentation scans the whole text).
    #[arg(long, value_name = "TOKENS")]
    scan_interval: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Problem-set manifest (JSONL) with replay recordings.
    #[arg(long, value_name = "FILE")]
    set: PathBuf,
    /// What to export: distributions, consistency, or tradeoff.
    #[arg(long, default_value = "distributions")]
    export: String,
    /// Comma-separated thresholds for the trade-off curve.
    #[arg(long)]
    values: Option<String>,
    /// Parallel sessions (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for the exported CSV files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    session: SessionFlags,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Optional TOML config file mirroring the session and driver flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    policy: Option<String>,
    tau: Option<f64>,
    alpha: Option<f64>,
    k: Option<usize>,
    profile: Option<String>,
    scan_interval: Option<usize>,
    max_steps: Option<usize>,
    max_total_tokens: Option<usize>,
    fixed_budget_tokens: Option<usize>,
    fallback_best_scoring: Option<bool>,
    workers: Option<usize>,
    numeric_judge: Option<bool>,
    replay: Option<PathBuf>,
    induction: Option<InductionFile>,
    endpoint: Option<EndpointFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct InductionFile {
    template: Option<String>,
    max_answer_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct EndpointFile {
    base_url: Option<String>,
    model: Option<String>,
    /// Name of the environment variable holding the API key. The key
    /// itself never appears in a config file or flag.
    api_key_env: Option<String>,
    top_k: Option<usize>,
    prompt_profile: Option<String>,
    temperature: Option<f64>,
    connect_timeout_secs: Option<u64>,
    request_timeout_secs: Option<u64>,
    max_retries: Option<usize>,
    retry_backoff_ms: Option<u64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Resolution: flags over file over defaults
// ---------------------------------------------------------------------------

fn resolve_session(flags: &SessionFlags, file: &FileConfig) -> Result<SessionConfig> {
    let defaults = SessionConfig::default();

    let policy = match flags.policy.as_deref().or(file.policy.as_deref()) {
        Some(name) => Policy::from_str(name)?,
        None => defaults.policy,
    };

    let window = WindowConfig::new(
        flags.k.or(file.k).unwrap_or(defaults.window.k),
        flags.alpha.or(file.alpha).unwrap_or(defaults.window.alpha),
        flags.tau.or(file.tau).unwrap_or(defaults.window.tau),
    )?;

    let mut segmenter = match flags.profile.as_deref().or(file.profile.as_deref()) {
        Some(name) => SegmenterConfig::profile(name)?,
        None => defaults.segmenter.clone(),
    };
    if let Some(interval) = flags.scan_interval.or(file.scan_interval) {
        segmenter.scan_interval_tokens = interval;
    }

    let prompt = match &file.induction {
        None => defaults.prompt.clone(),
        Some(section) => InductionPrompt::new(
            section
                .template
                .clone()
                .unwrap_or_else(|| defaults.prompt.template.clone()),
            section
                .max_answer_tokens
                .unwrap_or(defaults.prompt.max_answer_tokens),
        )?,
    };

    let config = SessionConfig {
        policy,
        window,
        segmenter,
        prompt,
        max_steps: flags.max_steps.or(file.max_steps).unwrap_or(defaults.max_steps),
        max_total_tokens: flags
            .max_total_tokens
            .or(file.max_total_tokens)
            .unwrap_or(defaults.max_total_tokens),
        fixed_budget_tokens: flags
            .fixed_budget_tokens
            .or(file.fixed_budget_tokens)
            .unwrap_or(defaults.fixed_budget_tokens),
        fallback_best_scoring: file
            .fallback_best_scoring
            .unwrap_or(defaults.fallback_best_scoring),
    };
    config.validate()?;
    Ok(config)
}

fn resolve_endpoint(flags: &DriverFlags, file: &FileConfig) -> EndpointConfig {
    let section = file.endpoint.clone().unwrap_or_default();
    let defaults = EndpointConfig::default();
    EndpointConfig {
        base_url: flags
            .endpoint
            .clone()
            .or(section.base_url)
            .unwrap_or(defaults.base_url),
        model: flags.model.clone().or(section.model).unwrap_or(defaults.model),
        api_key_env: section.api_key_env.unwrap_or(defaults.api_key_env),
        top_k: flags.top_k.or(section.top_k).unwrap_or(defaults.top_k),
        prompt_profile: section.prompt_profile.unwrap_or(defaults.prompt_profile),
        temperature: section.temperature.unwrap_or(defaults.temperature),
        connect_timeout_secs: section
            .connect_timeout_secs
            .unwrap_or(defaults.connect_timeout_secs),
        request_timeout_secs: section
            .request_timeout_secs
            .unwrap_or(defaults.request_timeout_secs),
        max_retries: section.max_retries.unwrap_or(defaults.max_retries),
        retry_backoff_ms: section.retry_backoff_ms.unwrap_or(defaults.retry_backoff_ms),
    }
}

/// Where one session's tokens come from.
enum DriverSource {
    Replay(PathBuf),
    Live(EndpointConfig),
}

fn resolve_driver(flags: &DriverFlags, file: &FileConfig) -> Result<DriverSource> {
    let replay = flags.replay.clone().or_else(|| file.replay.clone());
    match replay {
        Some(path) => {
            if flags.endpoint.is_some() {
                return Err(Error::config(
                    "--replay and --endpoint are mutually exclusive",
                ));
            }
            if !path.exists() {
                return Err(Error::config(format!(
                    "replay file not found: {}",
                    path.display()
                )));
            }
            Ok(DriverSource::Replay(path))
        }
        None => {
            let endpoint = resolve_endpoint(flags, file);
            if flags.endpoint.is_none() && file.endpoint.is_none() {
                return Err(Error::config(
                    "no token source: pass --replay FILE or --endpoint URL (or set one in the config file)",
                ));
            }
            Ok(DriverSource::Live(endpoint))
        }
    }
}

/// Driver mode for set-level commands: replay unless an endpoint is set.
fn resolve_set_mode(flags: &DriverFlags, file: &FileConfig) -> DriverMode {
    if flags.endpoint.is_some() || file.endpoint.is_some() {
        DriverMode::Live(resolve_endpoint(flags, file))
    } else {
        DriverMode::Replay
    }
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::config(format!("not a number in --values: {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()
        .and_then(|values| {
            if values.is_empty() {
                Err(Error::config("--values must name at least one number"))
            } else {
                Ok(values)
            }
        })
}

fn output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs, file: &FileConfig) -> Result<ExitCode> {
    let config = resolve_session(&args.session, file)?;
    let source = resolve_driver(&args.driver, file)?;

    // The positional is the question itself, or a file holding it.
    let flag_question = match &args.question {
        None => None,
        Some(text) => {
            let candidate = Path::new(text);
            if candidate.is_file() {
                Some(
                    std::fs::read_to_string(candidate)
                        .map_err(|e| {
                            Error::config(format!("cannot read {}: {e}", candidate.display()))
                        })?
                        .trim_end()
                        .to_string(),
                )
            } else {
                Some(text.clone())
            }
        }
    };

    let record = match source {
        DriverSource::Replay(path) => {
            let trace = Arc::new(ReplayTrace::load(&path)?);
            let question = flag_question.unwrap_or_else(|| trace.question.clone());
            let gold = args.gold.clone().or_else(|| trace.gold_answer.clone());
            run_with_recording(
                ReplayDriver::new(trace),
                args.record.as_deref(),
                &question,
                &config,
                gold.as_deref(),
            )?
        }
        DriverSource::Live(endpoint) => {
            let question = flag_question.ok_or_else(|| {
                Error::config("live sessions need a question (pass it as the argument)")
            })?;
            run_with_recording(
                LiveDriver::new(endpoint)?,
                args.record.as_deref(),
                &question,
                &config,
                args.gold.as_deref(),
            )?
        }
    };

    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&record)?;
        std::fs::write(path, json + "\n")
            .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    }

    println!("{}", summary_line(&record));

    // A session that completed with a driver failure is a session error.
    Ok(if record.error.is_some() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_with_recording<D: ModelDriver>(
    driver: D,
    record: Option<&Path>,
    question: &str,
    config: &SessionConfig,
    gold: Option<&str>,
) -> Result<SessionRecord> {
    match record {
        None => {
            let mut driver = driver;
            run_policy(&mut driver, question, config, gold)
        }
        Some(path) => {
            let mut recorder = RecordingDriver::new(driver, path, gold.map(str::to_string));
            let outcome = run_policy(&mut recorder, question, config, gold);
            let finished = recorder.finish();
            let record = outcome?;
            finished?;
            Ok(record)
        }
    }
}

fn summary_line(record: &SessionRecord) -> String {
    let decision = &record.decision;
    let answer = decision
        .final_answer
        .as_deref()
        .map(|a| format!("{a:?}"))
        .unwrap_or_else(|| "none".to_string());
    let score = decision
        .trigger_score
        .map(|s| format!("{s:.4}"))
        .unwrap_or_else(|| "-".to_string());
    let mut line = format!(
        "[{}] exit step {} ({}{}) answer={} S={} tokens: reasoning={} induction={} total={}",
        record.config.policy,
        decision.step_index,
        decision.reason,
        if decision.exited_early { ", early" } else { "" },
        answer,
        score,
        record.reasoning_tokens,
        record.induction_tokens,
        record.total_tokens(),
    );
    if let Some(error) = &record.error {
        line.push_str(&format!(" error={error:?}"));
    }
    line
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn build_evaluator(
    set: &Path,
    session: &SessionFlags,
    driver: &DriverFlags,
    workers: Option<usize>,
    numeric_judge: bool,
    file: &FileConfig,
) -> Result<Evaluator> {
    let config = resolve_session(session, file)?;
    let problems = ProblemSet::load(set)?;
    Ok(Evaluator::new(problems, config)
        .with_driver_mode(resolve_set_mode(driver, file))
        .with_numeric_judge(numeric_judge || file.numeric_judge.unwrap_or(false))
        .with_workers(workers.or(file.workers).unwrap_or(0)))
}

fn cmd_evaluate(args: EvaluateArgs, file: &FileConfig) -> Result<()> {
    let mut evaluator = build_evaluator(
        &args.set,
        &args.session,
        &args.driver,
        args.workers,
        args.numeric_judge,
        file,
    )?;
    let policy = evaluator.config().policy;
    if policy != Policy::Vanilla && !args.no_baseline {
        evaluator.vanilla_baseline()?;
    }
    let metrics = evaluator.evaluate(policy)?;

    write_metrics(std::io::stdout().lock(), std::slice::from_ref(&metrics))?;

    if let Some(dir) = &args.out {
        output_dir(dir)?;
        write_metrics_csv(dir.join("metrics.csv"), std::slice::from_ref(&metrics))?;
        write_items_csv(dir.join(format!("items_{policy}.csv")), &metrics)?;
        let json = serde_json::to_string_pretty(&metrics)?;
        let path = dir.join("metrics.json");
        std::fs::write(&path, json + "\n")
            .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    let evaluator = build_evaluator(
        &args.set,
        &args.session,
        &DriverFlags::default(),
        args.workers,
        false,
        file,
    )?;
    let axis = SweepAxis::from_str(&args.axis)?;
    let values = parse_values(&args.values)?;
    let rows = evaluator.sweep(axis, &values)?;

    write_sweep(std::io::stdout().lock(), &rows)?;

    if let Some(dir) = &args.out {
        output_dir(dir)?;
        write_sweep_csv(dir.join("sweep.csv"), &rows)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

fn cmd_segment(args: SegmentArgs, file: &FileConfig) -> Result<()> {
    let profile = args
        .profile
        .as_deref()
        .or(file.profile.as_deref())
        .unwrap_or("default");
    let mut config = SegmenterConfig::profile(profile)?;
    if let Some(interval) = args.scan_interval.or(file.scan_interval) {
        config.scan_interval_tokens = interval;
    }

    let bytes = std::fs::read(&args.file)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", args.file.display())))?;
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::config(format!(
            "{} is not valid UTF-8 text",
            args.file.display()
        ))
    })?;

    let mut segmenter = trace_exit::Segmenter::new(config)?;
    segmenter.feed(&text)?;
    let steps = segmenter.finalize()?;
    let mut openers = std::collections::HashMap::new();
    for event in segmenter.events() {
        openers.insert(event.char_position, event.marker.clone());
    }

    for step in &steps {
        match openers.get(&step.char_range.start) {
            Some(marker) => println!(
                "step {} chars {}..{} opened by {:?}",
                step.index, step.char_range.start, step.char_range.end, marker
            ),
            None => println!(
                "step {} chars {}..{}",
                step.index, step.char_range.start, step.char_range.end
            ),
        }
        println!("  {:?}", step.text);
    }
    println!(
        "{} steps, {} chars",
        steps.len(),
        text.chars().count()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn cmd_analyze(args: AnalyzeArgs, file: &FileConfig) -> Result<()> {
    let evaluator = build_evaluator(
        &args.set,
        &args.session,
        &DriverFlags::default(),
        args.workers,
        false,
        file,
    )?;
    match args.export.as_str() {
        "distributions" | "consistency" => {
            let records = evaluator.session_records(evaluator.config().policy)?;
            let export = export_distributions(&records);
            if export.missing_gold > 0 {
                eprintln!(
                    "note: skipped {} record(s) without a gold answer",
                    export.missing_gold
                );
            }
            if args.export == "distributions" {
                write_scores(std::io::stdout().lock(), &export)?;
            } else {
                write_consistency(std::io::stdout().lock(), &export)?;
            }
            if let Some(dir) = &args.out {
                output_dir(dir)?;
                write_scores_csv(dir.join("scores.csv"), &export)?;
                write_consistency_csv(dir.join("consistency.csv"), &export)?;
            }
        }
        "tradeoff" => {
            let values = match &args.values {
                Some(text) => parse_values(text)?,
                None => vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            };
            let policies = [Policy::Trace, Policy::SingleStep, Policy::Oracle];
            let points = evaluator.tradeoff_curve(&policies, &values)?;
            write_curve(std::io::stdout().lock(), &points)?;
            if let Some(dir) = &args.out {
                output_dir(dir)?;
                write_curve_csv(dir.join("tradeoff.csv"), &points)?;
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown export {other:?} (expected distributions, consistency, or tradeoff)"
            )));
        }
    }
    Ok(())
}

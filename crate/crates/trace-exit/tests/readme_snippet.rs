use std::sync::Arc;
use trace_exit::drivers::{ReplayDriver, ReplayTrace};
use trace_exit::{run_policy, Policy, SessionConfig, WindowConfig};

#[test]
fn readme_snippet_compiles_and_runs() -> trace_exit::Result<()> {
    let trace = Arc::new(ReplayTrace::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/fig11.jsonl"
    ))?);
    let question = trace.question.clone();
    let mut driver = ReplayDriver::new(trace);

    let config = SessionConfig {
        policy: Policy::Trace,
        window: WindowConfig::new(5, 0.7, 0.8)?,
        ..SessionConfig::default()
    };
    let record = run_policy(&mut driver, &question, &config, Some("1997/2"))?;
    assert_eq!(record.decision.final_answer.as_deref(), Some("1997/2"));
    Ok(())
}

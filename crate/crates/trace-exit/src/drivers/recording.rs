//! Pass-through driver that records a session to a replay file.
//!
//! Every token delivered to the session and every auxiliary generation is
//! appended to the file as it happens, so an interrupted run leaves a
//! loadable-as-partial file. [`RecordingDriver::finish`] writes the trailer
//! that marks the recording complete; a recording of a session that exited
//! early carries the exit step so coverage validation knows trailing
//! induction scripts are legitimately absent.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, Result};

use super::{DriverInfo, InductionRequest, InductionResponse, ModelDriver, TokenObservation, REPLAY_SCHEMA};

/// Records the session driven through it into a replay file.
pub struct RecordingDriver<D: ModelDriver> {
    inner: D,
    path: PathBuf,
    gold_answer: Option<String>,
    writer: Option<BufWriter<File>>,
    last_induction_step: usize,
    cancelled: bool,
}

impl<D: ModelDriver> RecordingDriver<D> {
    /// Wraps `inner`, recording to `path`. The file is created at `open`.
    pub fn new(inner: D, path: impl AsRef<Path>, gold_answer: Option<String>) -> Self {
        Self {
            inner,
            path: path.as_ref().to_path_buf(),
            gold_answer,
            writer: None,
            last_induction_step: 0,
            cancelled: false,
        }
    }

    fn write_line(&mut self, value: serde_json::Value) -> Result<()> {
        let w = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::usage("recording driver used before open"))?;
        serde_json::to_writer(&mut *w, &value)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Writes the trailer and closes the file, returning the inner driver.
    ///
    /// A recorder dropped without `finish` leaves no trailer, so the file
    /// loads only as a partial recording.
    pub fn finish(mut self) -> Result<D> {
        let cancelled_after_step = self.cancelled.then_some(self.last_induction_step);
        self.write_line(json!({
            "kind": "end",
            "cancelled_after_step": cancelled_after_step,
        }))?;
        if let Some(mut w) = self.writer.take() {
            w.flush()?;
        }
        Ok(self.inner)
    }
}

impl<D: ModelDriver> ModelDriver for RecordingDriver<D> {
    /// The recorder is transparent: sessions report the inner driver's
    /// identity, so a session run through a recorder and a session replayed
    /// from that recording produce identical records.
    fn info(&self) -> DriverInfo {
        self.inner.info()
    }

    fn open(&mut self, question: &str) -> Result<()> {
        if self.writer.is_some() {
            return Err(Error::usage(
                "recording driver records a single session; open called twice",
            ));
        }
        self.inner.open(question)?;
        let info = self.inner.info();
        self.writer = Some(BufWriter::new(File::create(&self.path)?));
        self.write_line(json!({
            "schema": REPLAY_SCHEMA,
            "question": question,
            "gold_answer": self.gold_answer,
            "model": info.model,
            "top_k": info.top_k,
        }))
    }

    fn next_token(&mut self) -> Result<Option<TokenObservation>> {
        let obs = self.inner.next_token()?;
        if let Some(obs) = &obs {
            self.write_line(json!({
                "kind": "token",
                "text": obs.text,
                "top": obs.top_candidates,
            }))?;
        }
        Ok(obs)
    }

    fn cancel_stream(&mut self) -> Result<()> {
        self.cancelled = true;
        self.inner.cancel_stream()
    }

    fn induce(&mut self, request: &InductionRequest) -> Result<InductionResponse> {
        let response = self.inner.induce(request)?;
        let tokens: Vec<serde_json::Value> = response
            .tokens
            .iter()
            .map(|t| json!({"text": t.text, "top": t.top_candidates}))
            .collect();
        self.write_line(json!({
            "kind": "induction",
            "step": request.step_index,
            "text": response.text(),
            "tokens": tokens,
        }))?;
        self.last_induction_step = self.last_induction_step.max(request.step_index);
        Ok(response)
    }
}

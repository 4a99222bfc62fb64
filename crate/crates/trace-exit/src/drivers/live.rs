//! Live driver for OpenAI-compatible chat-completions endpoints.
//!
//! Streams the main generation with `stream=true, logprobs=true,
//! top_logprobs=K` and issues auxiliary generations as separate,
//! non-streaming requests. Entropy scoring cannot run without token
//! logprobs, so an endpoint that omits them is a configuration error, not
//! something to paper over.
//!
//! The API key is read from an environment variable named in the config —
//! never from flags or config values.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    probability_from_logprob, DriverInfo, InductionRequest, InductionResponse, ModelDriver,
    TokenObservation,
};

const QWEN_INSTRUCTION: &str =
    "Please reason step by step, and put your final answer within \\boxed{}.";
const R1_DISTILL_INSTRUCTION: &str = "Think about the problem internally. Then output a short \
     explanation, and put your final answer within \\boxed{}.";
const GEMINI_INSTRUCTION: &str = "You are a careful and logical assistant. Please reason step \
     by step, and put your final answer within \\boxed{}.";

/// Connection and prompting parameters for a live endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API root, e.g.
    /// `https://api.example.com/v1`.
    pub base_url: String,
    /// Model identifier sent with every request.
    pub model: String,
    /// Name of the environment variable holding the API key. Requests go
    /// out unauthenticated when the variable is unset (local servers).
    pub api_key_env: String,
    /// Candidate count requested per token (`top_logprobs`).
    pub top_k: usize,
    /// Prompt profile: "qwen", "r1-distill", or "gemini".
    pub prompt_profile: String,
    /// Sampling temperature for the main stream; auxiliary generations are
    /// always greedy.
    pub temperature: f64,
    pub connect_timeout_secs: u64,
    pub request_timeout_secs: u64,
    /// Retries for opening a request (transport errors and retryable
    /// statuses), with exponential backoff.
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            model: String::new(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            top_k: 20,
            prompt_profile: "qwen".to_string(),
            temperature: 0.0,
            connect_timeout_secs: 10,
            request_timeout_secs: 600,
            max_retries: 3,
            retry_backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::config("endpoint base_url is empty"));
        }
        if self.model.is_empty() {
            return Err(Error::config("endpoint model is empty"));
        }
        if self.top_k < 1 {
            return Err(Error::config("top_k must be >= 1"));
        }
        question_messages(&self.prompt_profile, "x")?;
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Serialize)]
struct Message {
    role: &'static str,
    content: String,
}

/// Chat messages for the main generation, per model-family profile.
fn question_messages(profile: &str, question: &str) -> Result<Vec<Message>> {
    let msgs = match profile {
        "qwen" => vec![
            Message {
                role: "system",
                content: QWEN_INSTRUCTION.to_string(),
            },
            Message {
                role: "user",
                content: question.to_string(),
            },
        ],
        "r1-distill" => vec![
            Message {
                role: "system",
                content: R1_DISTILL_INSTRUCTION.to_string(),
            },
            Message {
                role: "user",
                content: question.to_string(),
            },
        ],
        "gemini" => vec![Message {
            role: "user",
            content: format!("{GEMINI_INSTRUCTION}\n\nQuestion: {question}\nSolution:"),
        }],
        other => {
            return Err(Error::config(format!(
                "unknown prompt profile {other:?} (expected \"qwen\", \"r1-distill\", or \"gemini\")"
            )))
        }
    };
    Ok(msgs)
}

// --- wire formats -----------------------------------------------------

#[derive(Debug, Deserialize)]
struct StreamChunk {
    choices: Vec<StreamChoice>,
}

#[derive(Debug, Deserialize)]
struct StreamChoice {
    #[serde(default)]
    delta: Option<Delta>,
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Delta {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    #[serde(default)]
    content: Option<Vec<LogprobEntry>>,
}

#[derive(Debug, Deserialize)]
struct LogprobEntry {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

fn missing_logprobs() -> Error {
    Error::MissingCapability(
        "token logprobs: the endpoint returned content without logprob data; \
         enable logprobs/top_logprobs support"
            .to_string(),
    )
}

fn observation_from_entry(entry: LogprobEntry, position: usize) -> TokenObservation {
    let candidates = entry
        .top_logprobs
        .into_iter()
        .map(|t| (t.token, probability_from_logprob(t.logprob)))
        .collect();
    TokenObservation::normalized(
        entry.token,
        candidates,
        probability_from_logprob(entry.logprob),
        position,
    )
}

/// Extracts token observations from one streamed chunk. Returns the
/// observations (possibly empty: role-only or finish chunks) and whether
/// the choice finished. Skips empty-text tokens.
fn chunk_observations(
    chunk: &str,
    start_position: usize,
) -> Result<(Vec<TokenObservation>, bool)> {
    let parsed: StreamChunk = serde_json::from_str(chunk)
        .map_err(|e| Error::driver(format!("bad stream chunk: {e}"), None, false))?;
    let mut out = Vec::new();
    let mut finished = false;
    let mut position = start_position;
    for choice in parsed.choices {
        if choice.finish_reason.is_some() {
            finished = true;
        }
        let entries = choice.logprobs.and_then(|l| l.content);
        match entries {
            Some(entries) => {
                for entry in entries {
                    if entry.token.is_empty() {
                        continue;
                    }
                    out.push(observation_from_entry(entry, position));
                    position += 1;
                }
            }
            None => {
                let has_content = choice
                    .delta
                    .as_ref()
                    .and_then(|d| d.content.as_deref())
                    .is_some_and(|c| !c.is_empty());
                if has_content {
                    return Err(missing_logprobs());
                }
            }
        }
    }
    Ok((out, finished))
}

/// Extracts the generated tokens of a non-streaming completion.
fn completion_observations(body: &str) -> Result<Vec<TokenObservation>> {
    let parsed: CompletionBody = serde_json::from_str(body)
        .map_err(|e| Error::driver(format!("bad completion body: {e}"), None, false))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::driver("completion had no choices", None, false))?;
    let entries = choice
        .logprobs
        .and_then(|l| l.content)
        .ok_or_else(missing_logprobs)?;
    Ok(entries
        .into_iter()
        .filter(|e| !e.token.is_empty())
        .enumerate()
        .map(|(i, e)| observation_from_entry(e, i))
        .collect())
}

/// Payload of an SSE data line, if the line carries one.
fn sse_data(line: &str) -> Option<&str> {
    let line = line.trim_end_matches('\r');
    line.strip_prefix("data:").map(str::trim_start)
}

struct StreamState {
    reader: BufReader<reqwest::blocking::Response>,
    pending: VecDeque<TokenObservation>,
    next_position: usize,
    done: bool,
}

/// Driver for one session against a live endpoint. Uses a shared
/// connection pool internally; run concurrent sessions on separate
/// `LiveDriver` instances.
pub struct LiveDriver {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    stream: Option<StreamState>,
}

impl LiveDriver {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok();
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(Duration::from_secs(config.connect_timeout_secs))
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| Error::config(format!("cannot build http client: {e}")))?;
        Ok(Self {
            config,
            client,
            api_key,
            stream: None,
        })
    }

    fn post_with_retries(&self, body: &serde_json::Value) -> Result<reqwest::blocking::Response> {
        let url = self.config.completions_url();
        let mut delay = Duration::from_millis(self.config.retry_backoff_ms);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return Ok(resp);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    let text = resp.text().unwrap_or_default();
                    let message = format!("endpoint returned {status}: {}", snippet(&text));
                    if !retryable {
                        return Err(Error::driver(message, None, false));
                    }
                    last_error = message;
                }
                Err(e) => last_error = format!("transport error: {e}"),
            }
        }
        Err(Error::driver(
            format!(
                "request failed after {} attempts: {last_error}",
                self.config.max_retries + 1
            ),
            None,
            true,
        ))
    }

    /// Reads SSE events until tokens arrive or the stream ends.
    fn fill_pending(&mut self) -> Result<()> {
        let state = self
            .stream
            .as_mut()
            .ok_or_else(|| Error::usage("next_token before open"))?;
        let mut line = String::new();
        while state.pending.is_empty() && !state.done {
            line.clear();
            let n = state
                .reader
                .read_line(&mut line)
                .map_err(|e| Error::driver(format!("stream read error: {e}"), None, false))?;
            if n == 0 {
                state.done = true;
                break;
            }
            let Some(data) = sse_data(&line) else {
                continue;
            };
            if data.is_empty() {
                continue;
            }
            if data == "[DONE]" {
                state.done = true;
                break;
            }
            // `finished` marks the choice's end; keep reading to [DONE].
            let (observations, _finished) = chunk_observations(data, state.next_position)?;
            state.next_position += observations.len();
            state.pending.extend(observations);
        }
        Ok(())
    }
}

fn snippet(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let cut: String = text.chars().take(LIMIT).collect();
        format!("{cut}…")
    }
}

impl ModelDriver for LiveDriver {
    fn info(&self) -> DriverInfo {
        DriverInfo {
            kind: "live".to_string(),
            model: Some(self.config.model.clone()),
            top_k: Some(self.config.top_k),
            replay: false,
        }
    }

    fn open(&mut self, question: &str) -> Result<()> {
        let messages = question_messages(&self.config.prompt_profile, question)?;
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "stream": true,
            "logprobs": true,
            "top_logprobs": self.config.top_k,
            "temperature": self.config.temperature,
        });
        let response = self.post_with_retries(&body)?;
        self.stream = Some(StreamState {
            reader: BufReader::new(response),
            pending: VecDeque::new(),
            next_position: 0,
            done: false,
        });
        Ok(())
    }

    fn next_token(&mut self) -> Result<Option<TokenObservation>> {
        self.fill_pending()?;
        let state = self.stream.as_mut().expect("fill_pending ensures stream");
        Ok(state.pending.pop_front())
    }

    fn cancel_stream(&mut self) -> Result<()> {
        // Dropping the response closes the connection; the server aborts
        // generation. Nothing more is delivered to the session.
        if let Some(state) = self.stream.take() {
            drop(state);
        }
        Ok(())
    }

    fn induce(&mut self, request: &InductionRequest) -> Result<InductionResponse> {
        // A fresh pooled connection; the paused main stream is untouched.
        let content = format!("{}\n\n{}", request.question, request.prompt);
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "stream": false,
            "logprobs": true,
            "top_logprobs": self.config.top_k,
            "temperature": 0.0,
            "max_tokens": request.max_tokens,
        });
        let response = self.post_with_retries(&body)?;
        let text = response
            .text()
            .map_err(|e| Error::driver(format!("reading completion body: {e}"), None, true))?;
        let tokens = completion_observations(&text)?;
        Ok(InductionResponse { tokens })
    }
}

impl std::fmt::Debug for LiveDriver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveDriver")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .field("streaming", &self.stream.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sse_data_lines() {
        assert_eq!(sse_data("data: {\"a\":1}"), Some("{\"a\":1}"));
        assert_eq!(sse_data("data: [DONE]\r"), Some("[DONE]"));
        assert_eq!(sse_data(": keepalive"), None);
        assert_eq!(sse_data("event: x"), None);
    }

    #[test]
    fn chunk_with_logprobs_becomes_observations() {
        let chunk = r#"{"choices":[{"delta":{"content":"42"},"logprobs":{"content":[
            {"token":"42","logprob":-0.01,"top_logprobs":[
                {"token":"42","logprob":-0.01},{"token":"41","logprob":-4.6}]}
        ]},"finish_reason":null}]}"#;
        let (obs, finished) = chunk_observations(chunk, 5).unwrap();
        assert!(!finished);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].position, 5);
        assert_eq!(obs[0].text, "42");
        let probs: Vec<f64> = obs[0].top_candidates.iter().map(|c| c.1).collect();
        assert!((probs[0] - 0.990).abs() < 1e-3);
        assert!((probs[1] - 0.010).abs() < 1e-3);
    }

    #[test]
    fn content_without_logprobs_is_a_capability_error() {
        let chunk = r#"{"choices":[{"delta":{"content":"hi"},"finish_reason":null}]}"#;
        let err = chunk_observations(chunk, 0).unwrap_err();
        assert!(matches!(err, Error::MissingCapability(_)));
    }

    #[test]
    fn role_only_and_finish_chunks_are_empty() {
        let role = r#"{"choices":[{"delta":{"role":"assistant"},"finish_reason":null}]}"#;
        let (obs, finished) = chunk_observations(role, 0).unwrap();
        assert!(obs.is_empty() && !finished);
        let fin = r#"{"choices":[{"delta":{},"finish_reason":"stop"}]}"#;
        let (obs, finished) = chunk_observations(fin, 0).unwrap();
        assert!(obs.is_empty() && finished);
    }

    #[test]
    fn completion_parsing_for_induction() {
        let body = r#"{"choices":[{"message":{"content":"4}"},"logprobs":{"content":[
            {"token":"4","logprob":-0.1,"top_logprobs":[{"token":"4","logprob":-0.1},{"token":"5","logprob":-2.5}]},
            {"token":"}","logprob":0.0,"top_logprobs":[{"token":"}","logprob":0.0}]}
        ]}}]}"#;
        let tokens = completion_observations(body).unwrap();
        assert_eq!(tokens.len(), 2);
        assert_eq!(tokens[1].text, "}");
        let no_logprobs = r#"{"choices":[{"message":{"content":"4"}}]}"#;
        assert!(matches!(
            completion_observations(no_logprobs).unwrap_err(),
            Error::MissingCapability(_)
        ));
    }

    #[test]
    fn profiles_build_expected_messages() {
        let qwen = question_messages("qwen", "Q?").unwrap();
        assert_eq!(qwen.len(), 2);
        assert_eq!(qwen[0].role, "system");
        let gemini = question_messages("gemini", "Q?").unwrap();
        assert_eq!(gemini.len(), 1);
        assert!(gemini[0].content.contains("Question: Q?"));
        assert!(gemini[0].content.ends_with("Solution:"));
        assert!(question_messages("nope", "Q?").is_err());
    }

    #[test]
    fn url_join_handles_trailing_slash() {
        let c = EndpointConfig {
            base_url: "http://h:1/v1/".into(),
            ..EndpointConfig::default()
        };
        assert_eq!(c.completions_url(), "http://h:1/v1/chat/completions");
    }

    #[test]
    fn config_validation() {
        let mut c = EndpointConfig {
            model: "m".into(),
            ..EndpointConfig::default()
        };
        c.validate().unwrap();
        c.prompt_profile = "bad".into();
        assert!(c.validate().is_err());
        let missing_model = EndpointConfig {
            model: String::new(),
            ..EndpointConfig::default()
        };
        assert!(missing_model.validate().is_err());
    }
}

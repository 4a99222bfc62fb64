//! Streaming segmentation of generated text into reasoning steps.
//!
//! Discourse markers ("Wait", "But", paragraph breaks, …) mark step
//! boundaries. The segmenter accumulates a token stream and scans for
//! markers every `scan_interval_tokens` tokens. Positions near the buffer
//! end stay unexamined until enough text has arrived to decide every marker
//! (and, in whole-word mode, the character that follows), so a marker split
//! across scan batches is found exactly once and results never depend on
//! the scan cadence or tokenization.
//!
//! A boundary marker begins the step it opens: step text starts with the
//! discourse cue that motivated the split, and step 1 is the preamble.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker set for the word-cue profile.
pub const DEFAULT_MARKERS: [&str; 5] = ["Wait", "But", "Let me think", "</think>", "Alternatively"];
/// Marker set for the paragraph-break profile.
pub const GEMINI_MARKERS: [&str; 1] = ["\n\n"];

/// Segmentation parameters.
///
/// Positions are character offsets into the accumulated text, since markers
/// need not align with token boundaries. Markers match case-sensitively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Ordered marker strings; when several match at one position, the
    /// first in this list wins.
    pub stop_tokens: Vec<String>,
    /// Scan for markers after every this many fed tokens.
    pub scan_interval_tokens: usize,
    /// Reject matches embedded in a longer word ("But" inside "Button").
    /// On for word markers, off for the paragraph profile.
    pub whole_word: bool,
    /// Truncate the text immediately before this many matches; `None`
    /// disables truncation. A limit of `m` yields at most `m` steps.
    pub match_limit: Option<usize>,
    /// Rescan window: characters near the buffer end left unexamined until
    /// the next scan, so no marker can straddle a scan edge undetected.
    /// Must be at least the longest marker length minus one.
    pub overlap_chars: usize,
}

impl SegmenterConfig {
    /// Configuration with the given markers, default scan cadence, and the
    /// minimal safe rescan overlap.
    pub fn with_markers<I, T>(markers: I, whole_word: bool) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let stop_tokens: Vec<String> = markers.into_iter().map(Into::into).collect();
        let overlap_chars = max_marker_chars(&stop_tokens).saturating_sub(1);
        Self {
            stop_tokens,
            scan_interval_tokens: 10,
            whole_word,
            match_limit: None,
            overlap_chars,
        }
    }

    /// Named marker profile: "default" (word cues, whole-word matching) or
    /// "gemini" (paragraph breaks).
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::with_markers(DEFAULT_MARKERS, true)),
            "gemini" => Ok(Self::with_markers(GEMINI_MARKERS, false)),
            other => Err(Error::config(format!(
                "unknown segmenter profile {other:?} (expected \"default\" or \"gemini\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stop_tokens.is_empty() {
            return Err(Error::invalid("stop_tokens must not be empty"));
        }
        if self.stop_tokens.iter().any(String::is_empty) {
            return Err(Error::invalid("stop tokens must not be empty strings"));
        }
        if self.scan_interval_tokens < 1 {
            return Err(Error::invalid("scan_interval_tokens must be >= 1"));
        }
        if self.match_limit == Some(0) {
            return Err(Error::invalid("match_limit must be >= 1"));
        }
        let min_overlap = max_marker_chars(&self.stop_tokens).saturating_sub(1);
        if self.overlap_chars < min_overlap {
            return Err(Error::invalid(format!(
                "overlap_chars = {} cannot cover the longest marker (need >= {min_overlap})",
                self.overlap_chars
            )));
        }
        Ok(())
    }
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self::with_markers(DEFAULT_MARKERS, true)
    }
}

fn max_marker_chars(stop_tokens: &[String]) -> usize {
    stop_tokens
        .iter()
        .map(|s| s.chars().count())
        .max()
        .unwrap_or(0)
}

/// A confirmed marker match that splits the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    /// The matched stop token.
    pub marker: String,
    /// Absolute character offset of the match in the accumulated text.
    pub char_position: usize,
    /// 1-based event index; positions are strictly increasing with it.
    pub ordinal: usize,
}

/// One reasoning step: a contiguous slice of the accumulated text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// 1-based step index.
    pub index: usize,
    /// The step's text; steps concatenate back to the (possibly truncated)
    /// input byte-for-byte.
    pub text: String,
    /// Number of fed tokens whose first character lies in this step.
    /// Zero for offline segmentation, which has no token feed.
    pub token_count: usize,
    /// Character range of the step in the accumulated text.
    pub char_range: Range<usize>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Incremental segmenter over a token stream.
///
/// Single-session state; independent segmenters may run on separate
/// threads.
#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegmenterConfig,
    markers: Vec<Vec<char>>,
    max_marker: usize,
    buffer: Vec<char>,
    token_starts: Vec<usize>,
    tokens_since_scan: usize,
    scanned_upto: usize,
    events: Vec<BoundaryEvent>,
    truncated_at: Option<usize>,
    finalized: bool,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let markers = config
            .stop_tokens
            .iter()
            .map(|s| s.chars().collect::<Vec<char>>())
            .collect::<Vec<_>>();
        let max_marker = markers.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            config,
            markers,
            max_marker,
            buffer: Vec::new(),
            token_starts: Vec::new(),
            tokens_since_scan: 0,
            scanned_upto: 0,
            events: Vec::new(),
            truncated_at: None,
            finalized: false,
        })
    }

    /// Appends one token in generation order and returns any newly
    /// confirmed boundary events. A scan runs only when the tokens fed
    /// since the previous scan reach `scan_interval_tokens`.
    pub fn feed(&mut self, token_text: &str) -> Result<Vec<BoundaryEvent>> {
        if self.finalized {
            return Err(Error::usage("feed called on a finalized segmenter"));
        }
        self.token_starts.push(self.buffer.len());
        self.buffer.extend(token_text.chars());
        self.tokens_since_scan += 1;
        if self.tokens_since_scan >= self.config.scan_interval_tokens {
            self.tokens_since_scan = 0;
            Ok(self.scan(false))
        } else {
            Ok(Vec::new())
        }
    }

    /// Ends the stream: scans the remaining tail, then partitions the text
    /// at the confirmed boundaries. The trailing segment becomes the final
    /// step; if the match limit was reached, text from the limiting match
    /// onward is dropped, including its token accounting.
    pub fn finalize(&mut self) -> Result<Vec<ReasoningStep>> {
        if self.finalized {
            return Err(Error::usage("finalize called twice"));
        }
        self.finalized = true;
        self.scan(true);
        Ok(self.partition())
    }

    /// Boundary events confirmed so far.
    pub fn events(&self) -> &[BoundaryEvent] {
        &self.events
    }

    /// Whether the match limit has been reached; callers should stop
    /// feeding (further tokens are ignored by step accounting).
    pub fn is_truncated(&self) -> bool {
        self.truncated_at.is_some()
    }

    /// Characters accumulated so far.
    pub fn len_chars(&self) -> usize {
        self.buffer.len()
    }

    /// The accumulated text up to `end` (character offset).
    pub fn text_prefix(&self, end: usize) -> String {
        self.buffer[..end.min(self.buffer.len())].iter().collect()
    }

    /// The full accumulated text (ignores truncation).
    pub fn full_text(&self) -> String {
        self.buffer.iter().collect()
    }

    /// Examines every position that is now decidable. A position is held
    /// back while a longer marker starting there could still complete in a
    /// future token (plus one lookahead character in whole-word mode); held
    /// positions are decided on a later scan or at finalize, where end of
    /// stream resolves them.
    fn scan(&mut self, at_end: bool) -> Vec<BoundaryEvent> {
        let mut fresh = Vec::new();
        if self.truncated_at.is_some() {
            return fresh;
        }
        let pending_tail = if at_end {
            0
        } else {
            let lookahead = usize::from(self.config.whole_word);
            (self.max_marker + lookahead - 1).max(self.config.overlap_chars)
        };
        let limit = self.buffer.len().saturating_sub(pending_tail);
        let mut p = self.scanned_upto;
        while p < limit {
            if let Some(m) = self.match_at(p) {
                // A match at position 0 would open an empty preamble step;
                // the marker simply starts step 1.
                if p > 0 {
                    let limiting = self
                        .config
                        .match_limit
                        .is_some_and(|limit| self.events.len() + 1 >= limit);
                    if limiting {
                        self.truncated_at = Some(p);
                        break;
                    }
                    let event = BoundaryEvent {
                        marker: self.config.stop_tokens[m].clone(),
                        char_position: p,
                        ordinal: self.events.len() + 1,
                    };
                    self.events.push(event.clone());
                    fresh.push(event);
                }
            }
            p += 1;
        }
        self.scanned_upto = self.truncated_at.unwrap_or_else(|| p.max(self.scanned_upto));
        fresh
    }

    /// First marker (in stop-token order) matching at `p`, or None.
    fn match_at(&self, p: usize) -> Option<usize> {
        'marker: for (m, chars) in self.markers.iter().enumerate() {
            let end = p + chars.len();
            if end > self.buffer.len() {
                continue; // ran off the stream; cannot match
            }
            for (i, &c) in chars.iter().enumerate() {
                if self.buffer[p + i] != c {
                    continue 'marker;
                }
            }
            if self.config.whole_word {
                let first = chars[0];
                if is_word_char(first) && p > 0 && is_word_char(self.buffer[p - 1]) {
                    continue;
                }
                let last = *chars.last().expect("markers are non-empty");
                if is_word_char(last) && end < self.buffer.len() && is_word_char(self.buffer[end])
                {
                    continue;
                }
            }
            return Some(m);
        }
        None
    }

    fn partition(&self) -> Vec<ReasoningStep> {
        let end = self.truncated_at.unwrap_or(self.buffer.len());
        let mut cuts = Vec::with_capacity(self.events.len() + 2);
        cuts.push(0);
        cuts.extend(self.events.iter().map(|e| e.char_position));
        cuts.push(end);
        let mut steps = Vec::with_capacity(cuts.len() - 1);
        for w in cuts.windows(2) {
            let (start, stop) = (w[0], w[1]);
            if start == stop {
                continue; // only possible for an entirely empty stream
            }
            let token_count = self
                .token_starts
                .iter()
                .filter(|&&s| start <= s && s < stop)
                .count();
            steps.push(ReasoningStep {
                index: steps.len() + 1,
                text: self.buffer[start..stop].iter().collect(),
                token_count,
                char_range: start..stop,
            });
        }
        steps
    }
}

/// Batch counterpart of feed + finalize: segments a complete text.
///
/// Produces the same boundaries as streaming the text under any
/// tokenization and any scan interval. Token counts are zero — there is no
/// token feed to count.
pub fn offline_segment(text: &str, config: &SegmenterConfig) -> Result<Vec<ReasoningStep>> {
    let mut seg = Segmenter::new(config.clone())?;
    seg.feed(text)?;
    let mut steps = seg.finalize()?;
    for s in &mut steps {
        s.token_count = 0;
    }
    Ok(steps)
}

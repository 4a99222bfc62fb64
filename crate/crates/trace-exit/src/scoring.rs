//! Answer-stability scoring.
//!
//! Pure functions over per-step evidence: normalized token entropy, answer
//! confidence, the answer consistency score (fraction of the last `k` steps
//! that induced a given answer), the confidence trajectory score (mean
//! confidence over the steps that induced it), and the combined stability
//! score used for the exit decision. Everything here is generic over
//! [`Scalar`]; the session pipeline uses the `f64` aliases from the crate
//! root.
//!
//! All functions are pure and safe to call concurrently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability distribution over the candidate tokens at one answer-token
/// position.
///
/// Construction renormalizes the entries to sum to 1: drivers only see the
/// top-K candidates the API exposes, and the truncated tail must not push
/// normalized entropy outside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution<S: Scalar> {
    probabilities: Vec<S>,
}

impl<S: Scalar> TokenDistribution<S> {
    /// Builds a distribution from raw candidate probabilities, renormalizing
    /// them to sum to 1.
    ///
    /// Fails on an empty list, on negative or non-finite entries, on entries
    /// above 1, and when every entry is zero.
    pub fn new(probabilities: Vec<S>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("token distribution must not be empty"));
        }
        let one = S::one();
        let mut sum = S::zero();
        for (i, &p) in probabilities.iter().enumerate() {
            if !p.is_finite() || p < S::zero() || p > one {
                return Err(Error::invalid(format!(
                    "candidate probability {i} out of [0,1]: {p:?}"
                )));
            }
            sum = sum + p;
        }
        if sum <= S::zero() {
            return Err(Error::invalid("candidate probabilities sum to zero"));
        }
        let probabilities = probabilities.into_iter().map(|p| p / sum).collect();
        Ok(Self { probabilities })
    }

    /// Renormalized entries, summing to 1.
    pub fn probabilities(&self) -> &[S] {
        &self.probabilities
    }

    /// Number of candidate tokens at this position.
    pub fn candidate_count(&self) -> usize {
        self.probabilities.len()
    }
}

/// Scalar confidence of an induced answer: one minus the mean normalized
/// entropy over its answer-token positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerConfidence<S: Scalar> {
    /// Confidence in `[0, 1]`.
    pub value: S,
    /// Number of answer tokens the mean ran over.
    pub token_count: usize,
}

/// Sliding-window parameters for the exit decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig<S: Scalar> {
    /// Window size: evidence from the most recent `k` steps is aggregated.
    pub k: usize,
    /// Mixing weight: `alpha` on consistency, `1 - alpha` on confidence.
    pub alpha: S,
    /// Exit threshold on the combined stability score.
    pub tau: S,
}

impl<S: Scalar> WindowConfig<S> {
    pub fn new(k: usize, alpha: S, tau: S) -> Result<Self> {
        let cfg = Self { k, alpha, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("window size k must be >= 1"));
        }
        let unit = S::zero()..=S::one();
        if !unit.contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha out of [0,1]: {}", self.alpha)));
        }
        if !unit.contains(&self.tau) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau out of [0,1]: {}", self.tau)));
        }
        Ok(())
    }
}

impl<S: Scalar> Default for WindowConfig<S> {
    /// Default decision parameters: `k = 5`, `alpha = 0.7`, `tau = 0.8`.
    fn default() -> Self {
        Self {
            k: 5,
            alpha: S::from_f64(0.7).unwrap(),
            tau: S::from_f64(0.8).unwrap(),
        }
    }
}

/// Evidence from one reasoning step: the induced answer (canonical form)
/// and its confidence, or neither when induction failed to parse an answer.
///
/// `answer` and `confidence` are present or absent together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvidence<S: Scalar> {
    /// 1-based reasoning step index.
    pub step_index: usize,
    /// Canonical induced answer, or `None` when parsing failed.
    pub answer: Option<String>,
    /// Confidence of the induced answer, absent exactly when `answer` is.
    pub confidence: Option<AnswerConfidence<S>>,
}

impl<S: Scalar> StepEvidence<S> {
    /// Evidence for a step whose induction produced a parseable answer.
    pub fn found(step_index: usize, answer: String, confidence: AnswerConfidence<S>) -> Self {
        Self {
            step_index,
            answer: Some(answer),
            confidence: Some(confidence),
        }
    }

    /// Evidence for a step whose induction produced no parseable answer.
    /// The step still occupies a window slot.
    pub fn absent(step_index: usize) -> Self {
        Self {
            step_index,
            answer: None,
            confidence: None,
        }
    }

    /// Confidence value when present.
    pub fn confidence_value(&self) -> Option<S> {
        self.confidence.as_ref().map(|c| c.value)
    }
}

/// Scores for one candidate answer over the current window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore<S: Scalar> {
    /// Canonical answer string.
    pub answer: String,
    /// Occurrences within the window.
    pub count: usize,
    /// Answer consistency score: `count / k`.
    pub acs: S,
    /// Confidence trajectory score: mean confidence over the steps that
    /// induced this answer.
    pub cts: S,
    /// Combined stability score: `alpha * acs + (1 - alpha) * cts`.
    pub s: S,
}

/// Per-step stability report: every candidate in the window with its
/// scores, the selected candidate, and the exit verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport<S: Scalar> {
    /// Candidates in order of first appearance in the window.
    pub candidates: Vec<CandidateScore<S>>,
    /// Highest-scoring candidate; ties go to the most recently induced.
    /// `None` when the window holds no parseable answers.
    pub selected: Option<String>,
    /// Whether the selected candidate's score reached the threshold.
    pub exit: bool,
}

impl<S: Scalar> StabilityReport<S> {
    /// Score of the selected candidate, when one exists.
    pub fn selected_score(&self) -> Option<S> {
        let selected = self.selected.as_deref()?;
        self.candidates
            .iter()
            .find(|c| c.answer == selected)
            .map(|c| c.s)
    }

    /// Scores of a specific candidate.
    pub fn candidate(&self, answer: &str) -> Option<&CandidateScore<S>> {
        self.candidates.iter().find(|c| c.answer == answer)
    }
}

fn clamp_unit<S: Scalar>(v: S) -> S {
    if v < S::zero() {
        S::zero()
    } else if v > S::one() {
        S::one()
    } else {
        v
    }
}

/// Normalized Shannon entropy of a candidate distribution, in `[0, 1]`.
///
/// `0 log 0` counts as 0, and a single-candidate position has entropy 0
/// (the position is fully determined). The log base cancels in the ratio;
/// natural log is used.
pub fn normalized_entropy<S: Scalar>(dist: &TokenDistribution<S>) -> S {
    let n = dist.candidate_count();
    if n == 1 {
        return S::zero();
    }
    // n equal probabilities have entropy exactly ln n, so the normalized
    // value is exactly 1; summing would land a few ulps off on either side.
    let first = dist.probabilities()[0];
    if dist.probabilities().iter().all(|&p| p == first) {
        return S::one();
    }
    let mut h = S::zero();
    for &p in dist.probabilities() {
        if p > S::zero() {
            h = h - p * p.ln();
        }
    }
    clamp_unit(h / S::from_count(n).ln())
}

/// Confidence of an induced answer: `1 -` mean normalized entropy over its
/// answer-token positions.
///
/// Fails on an empty list; an induced answer with zero tokens is an
/// induction failure and is handled upstream as absent evidence.
pub fn answer_confidence<S: Scalar>(dists: &[TokenDistribution<S>]) -> Result<AnswerConfidence<S>> {
    if dists.is_empty() {
        return Err(Error::invalid(
            "answer confidence needs at least one token distribution",
        ));
    }
    let mut sum = S::zero();
    for d in dists {
        sum = sum + normalized_entropy(d);
    }
    let mean = sum / S::from_count(dists.len());
    Ok(AnswerConfidence {
        value: clamp_unit(S::one() - mean),
        token_count: dists.len(),
    })
}

fn window_occurrences<'a, S: Scalar>(
    window: &'a [StepEvidence<S>],
    answer: &str,
) -> impl Iterator<Item = &'a StepEvidence<S>> {
    let answer = answer.to_owned();
    window
        .iter()
        .filter(move |e| e.answer.as_deref() == Some(answer.as_str()))
}

/// Answer consistency score: occurrences of `answer` in the window divided
/// by the window size `k`.
///
/// The denominator is always `k`, even while the window is still filling,
/// which keeps early exits conservative during the first steps. Callers
/// enumerate only answers that are present; asking about an absent answer
/// is a contract violation.
pub fn acs<S: Scalar>(window: &[StepEvidence<S>], answer: &str, k: usize) -> Result<S> {
    if k < 1 {
        return Err(Error::invalid("window size k must be >= 1"));
    }
    if window.len() > k {
        return Err(Error::invalid(format!(
            "window holds {} entries but k = {k}",
            window.len()
        )));
    }
    let count = window_occurrences(window, answer).count();
    if count == 0 {
        return Err(Error::invalid(format!(
            "answer {answer:?} does not appear in the window"
        )));
    }
    Ok(S::from_count(count) / S::from_count(k))
}

/// Confidence trajectory score: mean confidence over exactly the steps in
/// the window whose induced answer equals `answer`.
pub fn cts<S: Scalar>(window: &[StepEvidence<S>], answer: &str) -> Result<S> {
    let mut count = 0usize;
    let mut sum = S::zero();
    for e in window_occurrences(window, answer) {
        let c = e
            .confidence_value()
            .ok_or_else(|| Error::invalid("evidence has an answer but no confidence"))?;
        sum = sum + c;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(format!(
            "answer {answer:?} does not appear in the window"
        )));
    }
    Ok(sum / S::from_count(count))
}

/// Computes the stability score for every distinct answer in the window and
/// selects the highest-scoring one.
///
/// Ties on the score go to the most recently induced answer. A window with
/// no parseable answers yields an empty report with `exit = false`.
pub fn stability<S: Scalar>(
    window: &[StepEvidence<S>],
    config: &WindowConfig<S>,
) -> Result<StabilityReport<S>> {
    config.validate()?;
    if window.len() > config.k {
        return Err(Error::invalid(format!(
            "window holds {} entries but k = {}",
            window.len(),
            config.k
        )));
    }

    // Candidate accumulator in first-appearance order, so serialized
    // reports are deterministic.
    struct Acc<S> {
        answer: String,
        count: usize,
        conf_sum: S,
        last_pos: usize,
    }
    let mut accs: Vec<Acc<S>> = Vec::new();
    for (pos, e) in window.iter().enumerate() {
        let (Some(answer), Some(conf)) = (&e.answer, &e.confidence) else {
            continue;
        };
        match accs.iter_mut().find(|a| a.answer == *answer) {
            Some(a) => {
                a.count += 1;
                a.conf_sum = a.conf_sum + conf.value;
                a.last_pos = pos;
            }
            None => accs.push(Acc {
                answer: answer.clone(),
                count: 1,
                conf_sum: conf.value,
                last_pos: pos,
            }),
        }
    }

    let k = S::from_count(config.k);
    let mut candidates = Vec::with_capacity(accs.len());
    let mut best: Option<(S, usize, usize)> = None; // (s, last_pos, index into candidates)
    for (i, a) in accs.iter().enumerate() {
        let acs = S::from_count(a.count) / k;
        let cts = a.conf_sum / S::from_count(a.count);
        let s = config.alpha * acs + (S::one() - config.alpha) * cts;
        candidates.push(CandidateScore {
            answer: a.answer.clone(),
            count: a.count,
            acs,
            cts,
            s,
        });
        let better = match best {
            None => true,
            Some((bs, bpos, _)) => s > bs || (s == bs && a.last_pos > bpos),
        };
        if better {
            best = Some((s, a.last_pos, i));
        }
    }

    let (selected, exit) = match best {
        Some((s, _, i)) => (Some(candidates[i].answer.clone()), s >= config.tau),
        None => (None, false),
    };
    Ok(StabilityReport {
        candidates,
        selected,
        exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(ps: &[f64]) -> TokenDistribution<f64> {
        TokenDistribution::new(ps.to_vec()).unwrap()
    }

    fn conf(v: f64) -> AnswerConfidence<f64> {
        AnswerConfidence {
            value: v,
            token_count: 1,
        }
    }

    fn evidence(entries: &[(usize, Option<(&str, f64)>)]) -> Vec<StepEvidence<f64>> {
        entries
            .iter()
            .map(|(i, e)| match e {
                Some((a, c)) => StepEvidence::found(*i, (*a).to_string(), conf(*c)),
                None => StepEvidence::absent(*i),
            })
            .collect()
    }

    #[test]
    fn entropy_uniform_is_exactly_one() {
        assert_eq!(normalized_entropy(&dist(&[0.25, 0.25, 0.25, 0.25])), 1.0);
        // Sizes whose naive term-by-term sum would land a few ulps below 1.
        for n in [3usize, 6, 7, 10, 21, 25] {
            assert_eq!(normalized_entropy(&dist(&vec![1.0 / n as f64; n])), 1.0);
        }
    }

    #[test]
    fn entropy_one_hot_is_exactly_zero() {
        assert_eq!(normalized_entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn entropy_single_candidate_is_zero() {
        assert_eq!(normalized_entropy(&dist(&[1.0])), 0.0);
    }

    #[test]
    fn entropy_renormalizes_top_k() {
        // Same shape at half the mass: renormalization makes them equal.
        let a = normalized_entropy(&dist(&[0.35, 0.1, 0.05]));
        let b = normalized_entropy(&dist(&[0.7, 0.2, 0.1]));
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_distribution_rejected() {
        assert!(TokenDistribution::<f64>::new(vec![]).is_err());
        assert!(TokenDistribution::new(vec![0.5, -0.1]).is_err());
        assert!(TokenDistribution::new(vec![0.0, 0.0]).is_err());
        assert!(TokenDistribution::new(vec![1.5]).is_err());
    }

    #[test]
    fn confidence_one_hot_tokens_is_one() {
        let dists = vec![dist(&[1.0, 0.0]), dist(&[1.0, 0.0, 0.0])];
        let c = answer_confidence(&dists).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.token_count, 2);
    }

    #[test]
    fn confidence_empty_rejected() {
        assert!(answer_confidence::<f64>(&[]).is_err());
    }

    #[test]
    fn acs_fixed_denominator() {
        let w = evidence(&[(1, Some(("a", 0.9))), (2, Some(("a", 0.8)))]);
        // Unfilled window still divides by k.
        assert_eq!(acs(&w, "a", 5).unwrap(), 0.4);
    }

    #[test]
    fn acs_counts_occurrences() {
        let w = evidence(&[
            (1, Some(("a", 0.9))),
            (2, Some(("b", 0.9))),
            (3, Some(("a", 0.9))),
            (4, Some(("a", 0.9))),
            (5, Some(("c", 0.9))),
        ]);
        assert_eq!(acs(&w, "a", 5).unwrap(), 0.6);
        assert_eq!(acs(&w, "c", 5).unwrap(), 0.2);
        assert!(acs(&w, "zzz", 5).is_err());
    }

    #[test]
    fn acs_full_window_is_one() {
        let w = evidence(&[
            (1, Some(("a", 0.5))),
            (2, Some(("a", 0.5))),
            (3, Some(("a", 0.5))),
            (4, Some(("a", 0.5))),
            (5, Some(("a", 0.5))),
        ]);
        assert_eq!(acs(&w, "a", 5).unwrap(), 1.0);
    }

    #[test]
    fn cts_means_only_matching_steps() {
        let w = evidence(&[
            (1, Some(("a", 0.8))),
            (2, Some(("b", 0.1))),
            (3, Some(("a", 0.9))),
        ]);
        assert!((cts(&w, "a").unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(cts(&w, "b").unwrap(), 0.1);
    }

    #[test]
    fn cts_single_step() {
        let w = evidence(&[(3, Some(("998", 0.91)))]);
        assert_eq!(cts(&w, "998").unwrap(), 0.91);
    }

    #[test]
    fn stability_all_same_answer_exits() {
        let w = evidence(&[
            (1, Some(("A", 0.9))),
            (2, Some(("A", 0.9))),
            (3, Some(("A", 0.9))),
            (4, Some(("A", 0.9))),
            (5, Some(("A", 0.9))),
        ]);
        let cfg = WindowConfig::new(5, 0.7, 0.8).unwrap();
        let r = stability(&w, &cfg).unwrap();
        let s = r.selected_score().unwrap();
        assert!((s - 0.97).abs() < 1e-12);
        assert_eq!(r.selected.as_deref(), Some("A"));
        assert!(r.exit);
    }

    #[test]
    fn stability_transient_overconfidence_suppressed() {
        let w = evidence(&[
            (1, Some(("X", 0.3))),
            (2, Some(("Y", 0.5))),
            (3, Some(("998", 0.91))),
        ]);
        let cfg = WindowConfig::new(5, 0.7, 0.8).unwrap();
        let r = stability(&w, &cfg).unwrap();
        let c = r.candidate("998").unwrap();
        assert!((c.s - 0.413).abs() < 1e-12);
        assert_eq!(r.selected.as_deref(), Some("998"));
        assert!(!r.exit);
    }

    #[test]
    fn stability_alpha_extremes() {
        let w = evidence(&[
            (1, Some(("a", 0.4))),
            (2, Some(("b", 0.9))),
            (3, Some(("a", 0.6))),
        ]);
        let only_acs = stability(&w, &WindowConfig::new(5, 1.0, 0.8).unwrap()).unwrap();
        for c in &only_acs.candidates {
            assert_eq!(c.s, c.acs);
        }
        let only_cts = stability(&w, &WindowConfig::new(5, 0.0, 0.8).unwrap()).unwrap();
        for c in &only_cts.candidates {
            assert_eq!(c.s, c.cts);
        }
    }

    #[test]
    fn stability_tie_goes_to_most_recent() {
        // Two candidates with identical count and confidence.
        let w = evidence(&[
            (1, Some(("a", 0.5))),
            (2, Some(("b", 0.5))),
            (3, Some(("a", 0.5))),
            (4, Some(("b", 0.5))),
        ]);
        let cfg = WindowConfig::new(5, 0.7, 0.8).unwrap();
        let r = stability(&w, &cfg).unwrap();
        assert_eq!(r.selected.as_deref(), Some("b"));
    }

    #[test]
    fn stability_no_parseable_answers() {
        let w = evidence(&[(1, None), (2, None)]);
        let cfg = WindowConfig::default();
        let r = stability(&w, &cfg).unwrap();
        assert!(r.candidates.is_empty());
        assert_eq!(r.selected, None);
        assert!(!r.exit);
    }

    #[test]
    fn stability_absent_entries_still_dilute() {
        // The absent step occupies a slot but contributes no candidate.
        let w = evidence(&[(1, Some(("a", 1.0))), (2, None), (3, Some(("a", 1.0)))]);
        let cfg = WindowConfig::new(5, 1.0, 0.8).unwrap();
        let r = stability(&w, &cfg).unwrap();
        assert_eq!(r.candidate("a").unwrap().acs, 0.4);
    }

    #[test]
    fn window_larger_than_k_rejected() {
        let w = evidence(&[(1, Some(("a", 0.5))), (2, Some(("a", 0.5)))]);
        assert!(stability(&w, &WindowConfig::new(1, 0.7, 0.8).unwrap()).is_err());
        assert!(acs(&w, "a", 1).is_err());
    }

    #[test]
    fn works_in_f32() {
        let d = TokenDistribution::<f32>::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(normalized_entropy(&d), 1.0f32);
        let w = vec![StepEvidence::found(
            1,
            "a".into(),
            AnswerConfidence {
                value: 0.5f32,
                token_count: 1,
            },
        )];
        let cfg = WindowConfig::<f32>::default();
        let r = stability(&w, &cfg).unwrap();
        assert_eq!(r.candidate("a").unwrap().acs, 0.2f32);
    }
}

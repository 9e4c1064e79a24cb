//! Step-level (PRM) and group-level (GRM) scoring of reasoning traces.
//!
//! Every judge implements [`Judge`]. [`ReferenceJudge`] is a deterministic
//! lexical scorer; [`ExternalJudge`] forwards requests to an HTTP endpoint;
//! [`FallbackJudge`] wraps a primary judge and falls back to the reference
//! judge on failure.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::types::{normalize_label, CotTrace, HoiTriplet, DEFAULT_HUMAN_SYNONYMS};

/// A 1-based inclusive range of step indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    /// Zero-based slice bounds.
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start - 1..self.end
    }
}

impl From<[usize; 2]> for StepRange {
    fn from(r: [usize; 2]) -> Self {
        Self {
            start: r[0],
            end: r[1],
        }
    }
}

impl From<StepRange> for [usize; 2] {
    fn from(r: StepRange) -> Self {
        [r.start, r.end]
    }
}

/// Splits steps `1..=N` into consecutive ranges of `group_size`; the last
/// range holds the remainder.
pub fn partition_groups(trace: &CotTrace, group_size: usize) -> Vec<StepRange> {
    let size = group_size.max(1);
    let n = trace.len();
    (0..n.div_ceil(size))
        .map(|g| StepRange {
            start: g * size + 1,
            end: ((g + 1) * size).min(n),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub query: String,
    #[serde(rename = "steps", with = "trace_as_steps")]
    pub trace: CotTrace,
    #[serde(rename = "gt")]
    pub gt_triplets: Vec<HoiTriplet>,
    #[serde(rename = "groups")]
    pub group_partition: Vec<StepRange>,
}

mod trace_as_steps {
    use super::CotTrace;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &CotTrace, s: S) -> Result<S::Ok, S::Error> {
        t.steps.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CotTrace, D::Error> {
        Ok(CotTrace::new(Vec::<String>::deserialize(d)?))
    }
}

impl JudgeRequest {
    pub fn new(
        query: impl Into<String>,
        trace: CotTrace,
        gt_triplets: Vec<HoiTriplet>,
        group_size: usize,
    ) -> Self {
        let group_partition = partition_groups(&trace, group_size);
        Self {
            query: query.into(),
            trace,
            gt_triplets,
            group_partition,
        }
    }

    /// Checks that the partition covers `1..=N` in order with non-empty ranges.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut next = 1;
        for (j, r) in self.group_partition.iter().enumerate() {
            if r.start != next || r.end < r.start {
                out.push(format!("group {} = [{}, {}] breaks the partition", j + 1, r.start, r.end));
                return out;
            }
            next = r.end + 1;
        }
        if next != self.trace.len() + 1 {
            out.push("partition does not cover every step".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub step_scores: Vec<f64>,
    pub group_scores: Vec<f64>,
}

impl JudgeResponse {
    /// Checks lengths against the request and that all scores lie in [0, 1].
    pub fn check_against(&self, req: &JudgeRequest) -> Result<(), JudgeError> {
        if self.step_scores.len() != req.trace.len() {
            return Err(JudgeError::LengthMismatch {
                what: "step_scores",
                expected: req.trace.len(),
                got: self.step_scores.len(),
            });
        }
        if self.group_scores.len() != req.group_partition.len() {
            return Err(JudgeError::LengthMismatch {
                what: "group_scores",
                expected: req.group_partition.len(),
                got: self.group_scores.len(),
            });
        }
        let all = self.step_scores.iter().chain(&self.group_scores);
        if let Some(bad) = all.copied().find(|s| !(0.0..=1.0).contains(s)) {
            return Err(JudgeError::Malformed(format!("score {bad} outside [0, 1]")));
        }
        Ok(())
    }

    fn clamped(mut self) -> Result<Self, JudgeError> {
        for s in self.step_scores.iter_mut().chain(self.group_scores.iter_mut()) {
            if s.is_nan() {
                return Err(JudgeError::Malformed("NaN score".to_string()));
            }
            *s = s.clamp(0.0, 1.0);
        }
        Ok(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge request timed out")]
    Timeout,
    #[error("judge transport error: {0}")]
    Transport(String),
    #[error("malformed judge response: {0}")]
    Malformed(String),
    #[error("judge returned {got} {what}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Produces step and group scores for a reasoning trace.
pub trait Judge: Send + Sync {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError>;
}

/// Deterministic lexical judge.
///
/// A step scores the fraction of {gt verb, gt object, human} it mentions.
/// A group scores the mean of its steps times an ordering factor: 1 when an
/// entity (human or object) is mentioned before the first verb or no verb is
/// mentioned at all, 0.5 otherwise.
///
/// Words match case-insensitively as whole words; a word also matches a term
/// it extends by one of the inflection suffixes `s`, `es`, `ing`, `ed`, so
/// "holds" mentions "hold". Multi-word labels need every word present.
#[derive(Debug, Clone)]
pub struct ReferenceJudge {
    human_terms: Vec<Vec<String>>,
}

impl Default for ReferenceJudge {
    fn default() -> Self {
        Self::new(DEFAULT_HUMAN_SYNONYMS.iter().copied())
    }
}

const INFLECTIONS: [&str; 4] = ["s", "es", "ing", "ed"];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn word_matches(word: &str, term: &str) -> bool {
    word == term
        || INFLECTIONS
            .iter()
            .any(|suf| word.strip_suffix(suf) == Some(term))
}

/// Position of the earliest word at which every word of `term` has been seen.
fn first_mention(text_words: &[String], term: &[String]) -> Option<usize> {
    if term.is_empty() {
        return None;
    }
    term.iter()
        .map(|t| text_words.iter().position(|w| word_matches(w, t)))
        .try_fold(0, |acc, p| p.map(|p| acc.max(p)))
}

fn first_of_any(text_words: &[String], terms: &[Vec<String>]) -> Option<usize> {
    terms.iter().filter_map(|t| first_mention(text_words, t)).min()
}

impl ReferenceJudge {
    pub fn new<I, S>(human_synonyms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            human_terms: human_synonyms
                .into_iter()
                .map(|s| words(s.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    fn gt_terms(gt: &[HoiTriplet]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let verbs: BTreeSet<String> = gt.iter().map(|t| normalize_label(&t.verb_label)).collect();
        let objects: BTreeSet<String> =
            gt.iter().map(|t| normalize_label(&t.object_label)).collect();
        (
            verbs.iter().map(|v| words(v)).collect(),
            objects.iter().map(|o| words(o)).collect(),
        )
    }

    fn step_score(&self, step: &str, verbs: &[Vec<String>], objects: &[Vec<String>]) -> f64 {
        let w = words(step);
        let hits = [
            first_of_any(&w, verbs).is_some(),
            first_of_any(&w, objects).is_some(),
            first_of_any(&w, &self.human_terms).is_some(),
        ];
        hits.iter().filter(|h| **h).count() as f64 / 3.0
    }

    fn ordering_factor(&self, text_words: &[String], verbs: &[Vec<String>], objects: &[Vec<String>]) -> f64 {
        let verb = first_of_any(text_words, verbs);
        let entity = [
            first_of_any(text_words, objects),
            first_of_any(text_words, &self.human_terms),
        ]
        .into_iter()
        .flatten()
        .min();
        match (entity, verb) {
            (_, None) => 1.0,
            (Some(e), Some(v)) if e < v => 1.0,
            _ => 0.5,
        }
    }

    fn respond(&self, req: &JudgeRequest) -> JudgeResponse {
        let (verbs, objects) = Self::gt_terms(&req.gt_triplets);
        let step_scores: Vec<f64> = req
            .trace
            .steps
            .iter()
            .map(|s| self.step_score(s, &verbs, &objects))
            .collect();
        let group_scores = req
            .group_partition
            .iter()
            .map(|r| {
                let idx = r.indices();
                let mean = step_scores[idx.clone()].iter().sum::<f64>() / r.len() as f64;
                let text = req.trace.steps[idx].join(" ");
                mean * self.ordering_factor(&words(&text), &verbs, &objects)
            })
            .collect();
        JudgeResponse {
            step_scores,
            group_scores,
        }
    }
}

impl Judge for ReferenceJudge {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let problems = req.validate();
        if !problems.is_empty() {
            return Err(JudgeError::Malformed(problems.join("; ")));
        }
        Ok(self.respond(req))
    }
}

/// Connection settings for an HTTP judge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub max_inflight: usize,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: 5_000,
            max_inflight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Inflight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct InflightGuard<'a>(&'a Inflight);

impl Inflight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InflightGuard(self)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Judge backed by an HTTP endpoint speaking the JSON wire protocol.
pub struct ExternalJudge {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    inflight: Inflight,
}

impl ExternalJudge {
    pub fn new(config: EndpointConfig) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let inflight = Inflight::new(config.max_inflight);
        Ok(Self {
            config,
            client,
            inflight,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl Judge for ExternalJudge {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let _slot = self.inflight.acquire();
        let resp = self
            .client
            .post(&self.config.url)
            .json(req)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    JudgeError::Timeout
                } else {
                    JudgeError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(JudgeError::Transport(format!("HTTP status {status}")));
        }
        let body = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                JudgeError::Timeout
            } else {
                JudgeError::Transport(e.to_string())
            }
        })?;
        let parsed: JudgeResponse =
            serde_json::from_slice(&body).map_err(|e| JudgeError::Malformed(e.to_string()))?;
        let parsed = parsed.clamped()?;
        parsed.check_against(req)?;
        Ok(parsed)
    }
}

/// Uses `primary` and falls back to the reference judge when it fails.
pub struct FallbackJudge<J> {
    primary: J,
    fallback: ReferenceJudge,
    failures: AtomicUsize,
}

impl<J: Judge> FallbackJudge<J> {
    pub fn new(primary: J, fallback: ReferenceJudge) -> Self {
        Self {
            primary,
            fallback,
            failures: AtomicUsize::new(0),
        }
    }

    /// Number of requests answered by the fallback.
    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }
}

impl<J: Judge> Judge for FallbackJudge<J> {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        match self.primary.score(req) {
            Ok(r) => Ok(r),
            Err(e) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                log::warn!("judge failed ({e}); using reference judge");
                self.fallback.score(req)
            }
        }
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        (**self).score(req)
    }
}

impl<J: Judge + ?Sized> Judge for std::sync::Arc<J> {
    fn score(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        (**self).score(req)
    }
}

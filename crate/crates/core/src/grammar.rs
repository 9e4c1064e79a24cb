//! The structured output grammar.
//!
//! A conforming text is exactly one think block followed by one answer
//! block, with optional whitespace around and between them:
//!
//! ```text
//! <think>step one
//! step two</think><answer>(human, hold, cup | 0.1,0.1,0.4,0.9 | 0.3,0.3,0.5,0.5)
//! (person, ride, bicycle | 0,0,0.5,1 | 0.2,0.4,0.6,1)</answer>
//! ```
//!
//! - Reasoning steps are the non-blank lines of the think block, trimmed.
//! - Each non-blank line of the answer block is one triplet
//!   `(subject, verb, object | x_min,y_min,x_max,y_max | x_min,y_min,x_max,y_max)`;
//!   the first box is the human box, the second the object box.
//! - Labels are trimmed and must be non-empty; they cannot contain `,`, `|`,
//!   `(` or `)`.
//! - Coordinates are plain decimals (`digits` or `digits.digits`) in `[0, 1]`
//!   with `x_min < x_max` and `y_min < y_max`.
//! - Each of the four tag literals occurs exactly once in the whole text.
//!
//! At least one step and one triplet are required.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::types::{
    normalize_label, BoundingBox, CotTrace, HoiTriplet, StructuredOutput, Validate,
    DEFAULT_HUMAN_SYNONYMS,
};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("cannot serialize a format-invalid output")]
    FormatInvalid,
    #[error("output contents cannot be represented in the grammar: {0}")]
    Unrepresentable(String),
}

/// Returns true iff `text` conforms to the grammar.
pub fn check_format(text: &str) -> bool {
    parse_parts(text).is_some()
}

/// Parses `text`; malformed input yields `format_valid = false` with the raw
/// text preserved.
pub fn parse_output(text: &str) -> StructuredOutput {
    match parse_parts(text) {
        Some((steps, triplets)) => StructuredOutput {
            raw_text: text.to_string(),
            trace: CotTrace::new(steps),
            triplets,
            format_valid: true,
        },
        None => StructuredOutput::invalid(text),
    }
}

/// Renders the canonical text for a trace and triplet list.
pub fn render(trace: &CotTrace, triplets: &[HoiTriplet]) -> String {
    let mut out = String::new();
    out.push_str(THINK_OPEN);
    out.push_str(&trace.steps.join("\n"));
    out.push_str(THINK_CLOSE);
    out.push_str(ANSWER_OPEN);
    let lines: Vec<String> = triplets.iter().map(render_triplet).collect();
    out.push_str(&lines.join("\n"));
    out.push_str(ANSWER_CLOSE);
    out
}

pub fn render_triplet(t: &HoiTriplet) -> String {
    format!(
        "({}, {}, {} | {} | {})",
        t.subject_label,
        t.verb_label,
        t.object_label,
        render_box(&t.human_box),
        render_box(&t.object_box)
    )
}

fn render_box(b: &BoundingBox) -> String {
    // `{}` on f64 prints the shortest round-tripping decimal, never exponent form.
    // Adding 0.0 turns -0.0 into 0.0.
    b.coords()
        .iter()
        .map(|c| format!("{}", c + 0.0))
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a valid output to its canonical text.
pub fn serialize_output(o: &StructuredOutput) -> Result<String, GrammarError> {
    if !o.format_valid {
        return Err(GrammarError::FormatInvalid);
    }
    let text = render(&o.trace, &o.triplets);
    match parse_parts(&text) {
        Some((steps, triplets)) if steps == o.trace.steps && triplets == o.triplets => Ok(text),
        Some(_) => Err(GrammarError::Unrepresentable(
            "labels or steps are not in trimmed canonical form".to_string(),
        )),
        None => Err(GrammarError::Unrepresentable(
            "rendered text does not parse".to_string(),
        )),
    }
}

fn parse_parts(text: &str) -> Option<(Vec<String>, Vec<HoiTriplet>)> {
    if TAGS.iter().any(|tag| text.matches(tag).count() != 1) {
        return None;
    }
    let body = text.trim();
    let rest = body.strip_prefix(THINK_OPEN)?;
    let close = rest.find(THINK_CLOSE)?;
    let think = &rest[..close];
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();
    let answer = rest.strip_prefix(ANSWER_OPEN)?.strip_suffix(ANSWER_CLOSE)?;

    let steps: Vec<String> = non_blank_lines(think).map(str::to_string).collect();
    if steps.is_empty() {
        return None;
    }
    let triplets = non_blank_lines(answer)
        .map(parse_triplet)
        .collect::<Option<Vec<_>>>()?;
    if triplets.is_empty() {
        return None;
    }
    Some((steps, triplets))
}

fn non_blank_lines(s: &str) -> impl Iterator<Item = &str> {
    s.split('\n').map(str::trim).filter(|l| !l.is_empty())
}

fn parse_triplet(line: &str) -> Option<HoiTriplet> {
    let inner = line.strip_prefix('(')?.strip_suffix(')')?;
    if inner.contains(['(', ')']) {
        return None;
    }
    let parts: Vec<&str> = inner.split('|').collect();
    let [labels, human, object] = parts.as_slice() else {
        return None;
    };
    let labels: Vec<&str> = labels.split(',').map(str::trim).collect();
    let [subject, verb, obj] = labels.as_slice() else {
        return None;
    };
    if subject.is_empty() || verb.is_empty() || obj.is_empty() {
        return None;
    }
    Some(HoiTriplet::new(
        *subject,
        *verb,
        *obj,
        parse_box(human)?,
        parse_box(object)?,
    ))
}

fn parse_box(s: &str) -> Option<BoundingBox> {
    let coords = s
        .split(',')
        .map(|c| parse_coord(c.trim()))
        .collect::<Option<Vec<f64>>>()?;
    let coords: [f64; 4] = coords.try_into().ok()?;
    let b = BoundingBox::from(coords);
    b.is_valid().then_some(b)
}

fn parse_coord(s: &str) -> Option<f64> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !frac.is_none_or(digits) {
        return None;
    }
    s.parse().ok()
}

/// Domain constraints on the answer's labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub human_synonyms: BTreeSet<String>,
    /// Empty means any verb is accepted.
    pub verb_vocabulary: BTreeSet<String>,
    /// Empty means open vocabulary.
    pub object_vocabulary: BTreeSet<String>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            human_synonyms: DEFAULT_HUMAN_SYNONYMS.iter().map(|s| s.to_string()).collect(),
            verb_vocabulary: BTreeSet::new(),
            object_vocabulary: BTreeSet::new(),
        }
    }
}

impl ConstraintConfig {
    pub fn with_vocabularies<I, J, S, T>(verbs: I, objects: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            verb_vocabulary: verbs.into_iter().map(|v| normalize_label(v.as_ref())).collect(),
            object_vocabulary: objects
                .into_iter()
                .map(|o| normalize_label(o.as_ref()))
                .collect(),
            ..Self::default()
        }
    }

    pub fn is_human(&self, label: &str) -> bool {
        let label = normalize_label(label);
        self.human_synonyms.iter().any(|h| normalize_label(h) == label)
    }
}

impl Validate for ConstraintConfig {
    fn validate(&self) -> Vec<String> {
        if self.human_synonyms.is_empty() {
            vec!["human_synonyms is empty".to_string()]
        } else {
            Vec::new()
        }
    }
}

fn in_vocabulary(vocab: &BTreeSet<String>, label: &str) -> bool {
    let label = normalize_label(label);
    vocab.is_empty() || vocab.iter().any(|v| normalize_label(v) == label)
}

/// One violation per breached constraint per triplet.
pub fn validate_cot_constraints(o: &StructuredOutput, c: &ConstraintConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (i, t) in o.triplets.iter().enumerate() {
        let n = i + 1;
        if !c.is_human(&t.subject_label) {
            out.push(format!(
                "triplet {n}: subject not in human synonyms ('{}')",
                t.subject_label
            ));
        }
        if !in_vocabulary(&c.verb_vocabulary, &t.verb_label) {
            out.push(format!(
                "triplet {n}: verb not in vocabulary ('{}')",
                t.verb_label
            ));
        }
        if !in_vocabulary(&c.object_vocabulary, &t.object_label) {
            out.push(format!(
                "triplet {n}: object not in vocabulary ('{}')",
                t.object_label
            ));
        }
    }
    out
}

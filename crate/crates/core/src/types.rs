//! Domain types shared by every stage of the pipeline: boxes, triplets,
//! parsed outputs, ground truth, reward weights and rollout samples.
//!
//! All types are plain immutable values. Constructors do not enforce the
//! invariants; call [`Validate::validate`] to get the list of violations.

use serde::{Deserialize, Serialize};

use crate::grammar;

/// Human labels accepted as the subject of a triplet when no explicit
/// constraint set is configured.
pub const DEFAULT_HUMAN_SYNONYMS: &[&str] = &["human", "person", "man", "woman", "child"];

/// Tolerance for the composite-weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Collects invariant violations as human-readable descriptions.
pub trait Validate {
    /// Returns an empty list iff every invariant holds.
    fn validate(&self) -> Vec<String>;

    fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

/// Axis-aligned box in normalized image coordinates.
///
/// Serialized as a four-element array `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Builds a normalized box from pixel coordinates.
    pub fn from_pixels(coords: [f64; 4], width: f64, height: f64) -> Self {
        Self::new(
            coords[0] / width,
            coords[1] / height,
            coords[2] / width,
            coords[3] / height,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Mean absolute coordinate difference over the four coordinates.
    pub fn mean_l1(&self, other: &BoundingBox) -> f64 {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 4.0
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

impl Validate for BoundingBox {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let names = ["x_min", "y_min", "x_max", "y_max"];
        for (name, v) in names.iter().zip(self.coords()) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.x_min < self.x_max) {
            out.push("x_min < x_max violated".to_string());
        }
        if !(self.y_min < self.y_max) {
            out.push("y_min < y_max violated".to_string());
        }
        out
    }
}

/// A ⟨subject, verb, object⟩ relation with its human and object boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    #[serde(rename = "subject")]
    pub subject_label: String,
    #[serde(rename = "verb")]
    pub verb_label: String,
    #[serde(rename = "object")]
    pub object_label: String,
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
}

impl HoiTriplet {
    pub fn new(
        subject: impl Into<String>,
        verb: impl Into<String>,
        object: impl Into<String>,
        human_box: BoundingBox,
        object_box: BoundingBox,
    ) -> Self {
        Self {
            subject_label: subject.into(),
            verb_label: verb.into(),
            object_label: object.into(),
            human_box,
            object_box,
        }
    }
}

impl Validate for HoiTriplet {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let subject = normalize_label(&self.subject_label);
        if !DEFAULT_HUMAN_SYNONYMS.contains(&subject.as_str()) {
            out.push(format!(
                "subject '{}' not in human synonyms",
                self.subject_label
            ));
        }
        if self.verb_label.trim().is_empty() {
            out.push("verb label is empty".to_string());
        }
        if self.object_label.trim().is_empty() {
            out.push("object label is empty".to_string());
        }
        for v in self.human_box.validate() {
            out.push(format!("human_box: {v}"));
        }
        for v in self.object_box.validate() {
            out.push(format!("object_box: {v}"));
        }
        out
    }
}

/// Labels compare case-insensitively after trimming.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

pub fn labels_match(a: &str, b: &str) -> bool {
    normalize_label(a) == normalize_label(b)
}

/// Ordered reasoning steps from the `<think>` block.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CotTrace {
    pub steps: Vec<String>,
}

impl CotTrace {
    pub fn new(steps: Vec<String>) -> Self {
        Self { steps }
    }

    /// Number of reasoning steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl Validate for CotTrace {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps.is_empty() {
            out.push("trace has no steps".to_string());
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.trim().is_empty() {
                out.push(format!("step {} is empty", i + 1));
            }
        }
        out
    }
}

/// A sampled response: raw text plus its parsed trace and triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub raw_text: String,
    pub trace: CotTrace,
    pub triplets: Vec<HoiTriplet>,
    pub format_valid: bool,
}

impl StructuredOutput {
    /// An output whose text failed the grammar.
    pub fn invalid(raw_text: impl Into<String>) -> Self {
        Self {
            raw_text: raw_text.into(),
            trace: CotTrace::default(),
            triplets: Vec::new(),
            format_valid: false,
        }
    }

    /// Builds a valid output from parts, rendering the canonical text.
    pub fn from_parts(trace: CotTrace, triplets: Vec<HoiTriplet>) -> Self {
        let raw_text = grammar::render(&trace, &triplets);
        Self {
            raw_text,
            trace,
            triplets,
            format_valid: true,
        }
    }
}

impl Validate for StructuredOutput {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let conforms = grammar::check_format(&self.raw_text);
        if conforms != self.format_valid {
            out.push(format!(
                "format_valid = {} but grammar check returned {}",
                self.format_valid, conforms
            ));
        }
        if self.format_valid {
            out.extend(self.trace.validate());
            if self.triplets.is_empty() {
                out.push("valid output has no triplets".to_string());
            }
            for (i, t) in self.triplets.iter().enumerate() {
                for v in t.validate() {
                    out.push(format!("triplet {}: {v}", i + 1));
                }
            }
        } else if !self.trace.is_empty() || !self.triplets.is_empty() {
            out.push("invalid output must carry no trace or triplets".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationScheme {
    FineGrained,
    Precise,
    OpenVocabulary,
}

impl AnnotationScheme {
    pub const ALL: [AnnotationScheme; 3] = [
        AnnotationScheme::FineGrained,
        AnnotationScheme::Precise,
        AnnotationScheme::OpenVocabulary,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotationScheme::FineGrained => "fine_grained",
            AnnotationScheme::Precise => "precise",
            AnnotationScheme::OpenVocabulary => "open_vocabulary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

/// One annotated query. Serialized as a dataset JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    pub sample_id: String,
    pub query: String,
    pub annotation_scheme: AnnotationScheme,
    pub split: Split,
    #[serde(rename = "gt")]
    pub gt_triplets: Vec<HoiTriplet>,
}

impl Validate for GroundTruthSample {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.gt_triplets.is_empty() {
            out.push("gt_triplets is empty".to_string());
        }
        for (i, t) in self.gt_triplets.iter().enumerate() {
            for v in t.validate() {
                out.push(format!("gt triplet {}: {v}", i + 1));
            }
        }
        out
    }
}

/// Weights of the final weighted sum over the four reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub format: f64,
    pub detection: f64,
    pub interaction: f64,
    pub cot: f64,
}

impl CompositeWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.format, self.detection, self.interaction, self.cot]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            format: 0.25,
            detection: 0.25,
            interaction: 0.25,
            cot: 0.25,
        }
    }
}

/// Every weight and threshold used by the reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Overlap vs. coordinate-precision balance in the detection reward.
    pub beta_det: f64,
    /// Action vs. object balance in the interaction reward.
    pub gamma: f64,
    /// Step-level vs. group-level balance in the CoT reward.
    pub lambda_cot: f64,
    /// Mean-L1 threshold for coordinate precision.
    pub delta: f64,
    /// IoU threshold for overlap accuracy; fixed at 0.5.
    pub iou_threshold: f64,
    pub composite: CompositeWeights,
    /// Steps per GRM group.
    pub grm_group_size: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            beta_det: 0.5,
            gamma: 0.5,
            lambda_cot: 0.5,
            delta: 0.1,
            iou_threshold: 0.5,
            composite: CompositeWeights::default(),
            grm_group_size: 2,
        }
    }
}

fn check_unit(out: &mut Vec<String>, name: &str, v: f64) {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        out.push(format!("{name} = {v} outside [0, 1]"));
    }
}

impl Validate for RewardWeights {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        check_unit(&mut out, "beta_det", self.beta_det);
        check_unit(&mut out, "gamma", self.gamma);
        check_unit(&mut out, "lambda_cot", self.lambda_cot);
        if !(self.delta.is_finite() && self.delta > 0.0) {
            out.push(format!("delta = {} must be > 0", self.delta));
        }
        if self.iou_threshold != 0.5 {
            out.push(format!(
                "iou_threshold = {} must be 0.5",
                self.iou_threshold
            ));
        }
        let names = ["w_format", "w_detection", "w_interaction", "w_cot"];
        for (name, w) in names.iter().zip(self.composite.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                out.push(format!("{name} = {w} must be non-negative"));
            }
        }
        if (self.composite.sum() - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            out.push(format!(
                "composite weights must sum to 1 (got {})",
                self.composite.sum()
            ));
        }
        if self.grm_group_size < 1 {
            out.push("grm_group_size must be >= 1".to_string());
        }
        out
    }
}

/// Per-sample values of the four reward terms, their components and the
/// weighted composite.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_det: f64,
    pub r_int: f64,
    pub r_cot: f64,
    pub r_iou_component: f64,
    pub r_reg_component: f64,
    pub r_act_component: f64,
    pub r_obj_component: f64,
    pub r_prm_component: f64,
    pub r_grm_component: f64,
    pub composite: f64,
}

impl RewardBreakdown {
    /// Checks the affine identities against the weights that produced it.
    pub fn validate_with(&self, w: &RewardWeights) -> Vec<String> {
        let mut out = self.validate();
        let tol = 1e-12;
        let det = w.beta_det * self.r_iou_component + (1.0 - w.beta_det) * self.r_reg_component;
        let int = w.gamma * self.r_act_component + (1.0 - w.gamma) * self.r_obj_component;
        let cot =
            w.lambda_cot * self.r_prm_component + (1.0 - w.lambda_cot) * self.r_grm_component;
        if self.r_format != 0.0 {
            if (self.r_det - det).abs() > tol {
                out.push("r_det does not match its components".to_string());
            }
            if (self.r_int - int).abs() > tol {
                out.push("r_int does not match its components".to_string());
            }
            if (self.r_cot - cot).abs() > tol {
                out.push("r_cot does not match its components".to_string());
            }
        }
        out
    }
}

impl Validate for RewardBreakdown {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.r_format != 0.0 && self.r_format != 1.0 {
            out.push(format!("r_format = {} must be 0 or 1", self.r_format));
        }
        let fields = [
            ("r_det", self.r_det),
            ("r_int", self.r_int),
            ("r_cot", self.r_cot),
            ("r_iou_component", self.r_iou_component),
            ("r_reg_component", self.r_reg_component),
            ("r_act_component", self.r_act_component),
            ("r_obj_component", self.r_obj_component),
            ("r_prm_component", self.r_prm_component),
            ("r_grm_component", self.r_grm_component),
            ("composite", self.composite),
        ];
        for (name, v) in fields {
            check_unit(&mut out, name, v);
        }
        if self.r_format == 0.0 && (self.r_det != 0.0 || self.r_int != 0.0 || self.r_cot != 0.0) {
            out.push("format-invalid output must have zero task rewards".to_string());
        }
        out
    }
}

/// One member of a rollout group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub output: StructuredOutput,
    pub logp_current: f64,
    pub logp_old: f64,
    pub logp_ref: f64,
    /// π_θ(o|q) / π_old(o|q).
    pub ratio: f64,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

impl Validate for GroupSample {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.ratio > 0.0) {
            out.push(format!("ratio = {} must be > 0", self.ratio));
        }
        let expected = (self.logp_current - self.logp_old).exp();
        if (self.ratio - expected).abs() > 1e-9 {
            out.push(format!(
                "ratio = {} but exp(logp_current - logp_old) = {expected}",
                self.ratio
            ));
        }
        out.extend(self.reward.validate());
        out
    }
}

/// Optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Samples per group (G).
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// KL penalty coefficient.
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Gradient steps taken against each `π_old` snapshot.
    pub inner_steps: usize,
    /// Standard deviations below this yield zero advantages.
    pub std_guard: f64,
    pub rng_seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            beta_kl: 0.04,
            learning_rate: 0.5,
            iterations: 500,
            inner_steps: 1,
            std_guard: 1e-8,
            rng_seed: 0,
        }
    }
}

impl Validate for GrpoConfig {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.group_size < 2 {
            out.push(format!("group_size = {} must be >= 2", self.group_size));
        }
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0) {
            out.push(format!("clip_epsilon = {} must be > 0", self.clip_epsilon));
        }
        if !(self.beta_kl.is_finite() && self.beta_kl >= 0.0) {
            out.push(format!("beta_kl = {} must be >= 0", self.beta_kl));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(format!("learning_rate = {} must be > 0", self.learning_rate));
        }
        if self.iterations < 1 {
            out.push("iterations must be >= 1".to_string());
        }
        if self.inner_steps < 1 {
            out.push("inner_steps must be >= 1".to_string());
        }
        if !(self.std_guard.is_finite() && self.std_guard > 0.0) {
            out.push(format!("std_guard = {} must be > 0", self.std_guard));
        }
        out
    }
}

//! A small synthetic HOI world whose output space can be enumerated.
//!
//! Scenes place boxes on a `1/K` grid. The policy chooses among a finite
//! table of complete canonical outputs, so `π(o|q)` is exact and every
//! expectation over the policy can be computed by summation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::Policy;
use crate::judge::Judge;
use crate::metrics::{score_sample, MetricValues};
use crate::reward::{RewardEngine, RewardError};
use crate::types::{
    normalize_label, AnnotationScheme, BoundingBox, CotTrace, GroundTruthSample, HoiTriplet,
    RewardBreakdown, Split, StructuredOutput, Validate,
};

/// Upper bound on the number of templates in a table.
pub const MAX_TEMPLATES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Boxes are multiples of `1 / grid_resolution`.
    pub grid_resolution: usize,
    /// Ground-truth triplets per scene.
    pub n_objects: usize,
    pub verb_vocabulary: Vec<String>,
    pub object_vocabulary: Vec<String>,
    /// Candidate boxes per anchor in the template table, ground truth included.
    pub candidate_boxes: usize,
    /// Subsample the template cross product down to this many entries.
    pub template_cap: Option<usize>,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid_resolution: 8,
            n_objects: 1,
            verb_vocabulary: ["hold", "ride", "push", "kick"].map(String::from).to_vec(),
            object_vocabulary: ["cup", "bicycle", "ball", "book"].map(String::from).to_vec(),
            candidate_boxes: 4,
            template_cap: None,
            rng_seed: 0,
        }
    }
}

impl Validate for SceneSpec {
    fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.grid_resolution < 2 {
            out.push("grid_resolution must be >= 2".to_string());
        }
        if self.n_objects < 1 {
            out.push("n_objects must be >= 1".to_string());
        }
        if self.verb_vocabulary.is_empty() || self.verb_vocabulary.len() > 8 {
            out.push("verb_vocabulary must hold 1..=8 entries".to_string());
        }
        if self.object_vocabulary.is_empty() || self.object_vocabulary.len() > 8 {
            out.push("object_vocabulary must hold 1..=8 entries".to_string());
        }
        if self.candidate_boxes < 1 {
            out.push("candidate_boxes must be >= 1".to_string());
        }
        if let Some(cap) = self.template_cap {
            if cap == 0 || cap > MAX_TEMPLATES {
                out.push(format!("template_cap must be in 1..={MAX_TEMPLATES}"));
            }
        }
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ToyError {
    #[error("invalid scene spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("template table would hold {size} entries (limit {MAX_TEMPLATES}); set a template cap")]
    TableTooLarge { size: u128 },
    #[error("sample has no ground-truth triplets")]
    EmptyScene,
}

fn grid_box(rng: &mut impl Rng, k: usize) -> BoundingBox {
    let x0 = rng.gen_range(0..k);
    let x1 = rng.gen_range(x0 + 1..=k);
    let y0 = rng.gen_range(0..k);
    let y1 = rng.gen_range(y0 + 1..=k);
    cells_to_box([x0, y0, x1, y1], k)
}

fn cells_to_box(c: [usize; 4], k: usize) -> BoundingBox {
    let k = k as f64;
    BoundingBox::new(c[0] as f64 / k, c[1] as f64 / k, c[2] as f64 / k, c[3] as f64 / k)
}

fn box_to_cells(b: &BoundingBox, k: usize) -> [usize; 4] {
    b.coords().map(|c| (c * k as f64).round().max(0.0) as usize)
}

/// True when every coordinate is a multiple of `1/k`.
pub fn on_grid(b: &BoundingBox, k: usize) -> bool {
    b.coords().iter().all(|c| {
        let scaled = c * k as f64;
        (scaled - scaled.round()).abs() < 1e-9
    })
}

/// Third-person singular: "hold" → "holds", "push" → "pushes".
pub fn third_person(verb: &str) -> String {
    let mut words: Vec<String> = verb.split_whitespace().map(String::from).collect();
    if let Some(first) = words.first_mut() {
        let sibilant = ["s", "sh", "ch", "x", "z"].iter().any(|s| first.ends_with(s));
        first.push_str(if sibilant { "es" } else { "s" });
    }
    words.join(" ")
}

fn gerund(verb: &str) -> String {
    let mut words: Vec<String> = verb.split_whitespace().map(String::from).collect();
    if let Some(first) = words.first_mut() {
        if first.ends_with('e') && !first.ends_with("ee") && first.len() > 2 {
            first.pop();
        }
        first.push_str("ing");
    }
    words.join(" ")
}

const COLORS: [&str; 5] = ["black", "red", "blue", "green", "white"];
const PERSONS: [&str; 3] = ["man", "woman", "person"];

fn render_query(scheme: AnnotationScheme, triplets: &[HoiTriplet], rng: &mut impl Rng) -> String {
    let person = PERSONS[rng.gen_range(0..PERSONS.len())];
    match scheme {
        AnnotationScheme::FineGrained => {
            let clothes = COLORS[rng.gen_range(0..COLORS.len())];
            let acts: Vec<String> = triplets
                .iter()
                .map(|t| {
                    let color = COLORS[rng.gen_range(0..COLORS.len())];
                    format!("{} a {} {}", gerund(&t.verb_label), color, t.object_label)
                })
                .collect();
            format!("A {person} wearing {clothes} clothes is {}", acts.join(" and "))
        }
        AnnotationScheme::Precise => {
            let acts: Vec<String> = triplets
                .iter()
                .map(|t| format!("{} the {}", gerund(&t.verb_label), t.object_label))
                .collect();
            format!("A {person} is {}", acts.join(" and "))
        }
        AnnotationScheme::OpenVocabulary => {
            if rng.gen_bool(0.5) {
                format!("What is the {person} doing?")
            } else {
                "What is happening in the image?".to_string()
            }
        }
    }
}

/// A ground-truth sample drawn deterministically from `spec.rng_seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<GroundTruthSample, ToyError> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(ToyError::InvalidSpec(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let scheme = AnnotationScheme::ALL[rng.gen_range(0..3)];
    let split = if rng.gen_bool(0.5) {
        Split::Seen
    } else {
        Split::Unseen
    };
    let k = spec.grid_resolution;
    let gt_triplets: Vec<HoiTriplet> = (0..spec.n_objects)
        .map(|_| {
            let verb = spec.verb_vocabulary.choose(&mut rng).cloned().unwrap_or_default();
            let object = spec.object_vocabulary.choose(&mut rng).cloned().unwrap_or_default();
            let human = grid_box(&mut rng, k);
            let obj_box = grid_box(&mut rng, k);
            HoiTriplet::new("human", verb, object, human, obj_box)
        })
        .collect();
    let query = render_query(scheme, &gt_triplets, &mut rng);
    Ok(GroundTruthSample {
        sample_id: format!("scene-{}", spec.rng_seed),
        query,
        annotation_scheme: scheme,
        split,
        gt_triplets,
    })
}

/// The ground-truth box first, then distinct alternatives: one-cell shifts
/// of the ground truth alternating with random grid boxes.
fn candidate_boxes(gt: &BoundingBox, k: usize, n: usize, rng: &mut impl Rng) -> Vec<BoundingBox> {
    let base = box_to_cells(gt, k);
    let mut cells = vec![base];
    let mut attempts = 0;
    while cells.len() < n && attempts < 10_000 {
        attempts += 1;
        let c = if cells.len() % 2 == 1 {
            let dx: i64 = rng.gen_range(-1..=1);
            let dy: i64 = rng.gen_range(-1..=1);
            let shift = |v: usize, d: i64| (v as i64 + d).clamp(0, k as i64) as usize;
            let c = [shift(base[0], dx), shift(base[1], dy), shift(base[2], dx), shift(base[3], dy)];
            if c[0] >= c[2] || c[1] >= c[3] {
                continue;
            }
            c
        } else {
            box_to_cells(&grid_box(rng, k), k)
        };
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    // keep the ground truth verbatim so off-grid boxes stay exact
    std::iter::once(*gt)
        .chain(cells.into_iter().skip(1).map(|c| cells_to_box(c, k)))
        .collect()
}

fn with_first<'a>(first: &str, vocab: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut out = vec![first.to_string()];
    for v in vocab {
        if !out.iter().any(|o| normalize_label(o) == normalize_label(v)) {
            out.push(v.clone());
        }
    }
    out
}

/// Think steps rendered from a triplet list.
pub fn render_steps(triplets: &[HoiTriplet]) -> CotTrace {
    let steps = triplets
        .iter()
        .flat_map(|t| {
            [
                format!("locate the human and the {} they {}", t.object_label, t.verb_label),
                format!("the human {} the {}", third_person(&t.verb_label), t.object_label),
            ]
        })
        .collect();
    CotTrace::new(steps)
}

/// The canonical output that reproduces a sample's ground truth exactly.
pub fn gt_rendering(sample: &GroundTruthSample) -> StructuredOutput {
    StructuredOutput::from_parts(render_steps(&sample.gt_triplets), sample.gt_triplets.clone())
}

struct SlotChoices {
    verbs: Vec<String>,
    objects: Vec<String>,
    human_boxes: Vec<BoundingBox>,
    object_boxes: Vec<BoundingBox>,
}

impl SlotChoices {
    fn count(&self) -> usize {
        self.verbs.len() * self.objects.len() * self.human_boxes.len() * self.object_boxes.len()
    }

    fn triplet(&self, mut i: usize) -> HoiTriplet {
        let ob = i % self.object_boxes.len();
        i /= self.object_boxes.len();
        let hb = i % self.human_boxes.len();
        i /= self.human_boxes.len();
        let o = i % self.objects.len();
        i /= self.objects.len();
        let v = i % self.verbs.len();
        HoiTriplet::new(
            "human",
            self.verbs[v].clone(),
            self.objects[o].clone(),
            self.human_boxes[hb],
            self.object_boxes[ob],
        )
    }
}

/// The finite output space of a [`TemplatePolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateTable {
    templates: Vec<StructuredOutput>,
    index: HashMap<String, usize>,
}

impl TemplateTable {
    pub fn from_outputs(templates: Vec<StructuredOutput>) -> Self {
        let index = templates
            .iter()
            .enumerate()
            .map(|(i, t)| (t.raw_text.clone(), i))
            .collect();
        Self { templates, index }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, i: usize) -> &StructuredOutput {
        &self.templates[i]
    }

    pub fn templates(&self) -> &[StructuredOutput] {
        &self.templates
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(|t| t.raw_text.as_str())
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }
}

/// Cross product of (verb, object, human box, object box) per ground-truth
/// slot, optionally subsampled to `spec.template_cap` entries. Index 0 is
/// always the exact ground-truth rendering.
pub fn build_template_table(spec: &SceneSpec, scene: &GroundTruthSample) -> Result<TemplateTable, ToyError> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(ToyError::InvalidSpec(problems));
    }
    if scene.gt_triplets.is_empty() {
        return Err(ToyError::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x7465_6d70_6c61_7465);
    let k = spec.grid_resolution;
    let slots: Vec<SlotChoices> = scene
        .gt_triplets
        .iter()
        .map(|t| SlotChoices {
            verbs: with_first(&t.verb_label, &spec.verb_vocabulary),
            objects: with_first(&t.object_label, &spec.object_vocabulary),
            human_boxes: candidate_boxes(&t.human_box, k, spec.candidate_boxes, &mut rng),
            object_boxes: candidate_boxes(&t.object_box, k, spec.candidate_boxes, &mut rng),
        })
        .collect();

    let total = slots
        .iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(s.count() as u128))
        .unwrap_or(u128::MAX);
    let limit = spec.template_cap.unwrap_or(MAX_TEMPLATES);
    let chosen: Vec<usize> = if total <= limit as u128 {
        (0..total as usize).collect()
    } else if spec.template_cap.is_none() || total > usize::MAX as u128 {
        return Err(ToyError::TableTooLarge { size: total });
    } else {
        let mut picked = index::sample(&mut rng, total as usize, limit).into_vec();
        if !picked.contains(&0) {
            picked[limit - 1] = 0;
        }
        picked.sort_unstable();
        picked
    };

    let templates = chosen
        .into_iter()
        .map(|mut i| {
            let triplets: Vec<HoiTriplet> = slots
                .iter()
                .map(|s| {
                    let t = s.triplet(i % s.count());
                    i /= s.count();
                    t
                })
                .collect();
            StructuredOutput::from_parts(render_steps(&triplets), triplets)
        })
        .collect();
    Ok(TemplateTable::from_outputs(templates))
}

/// Softmax policy with one logit per template.
#[derive(Debug, Clone)]
pub struct TemplatePolicy {
    theta: Vec<f64>,
    table: Arc<TemplateTable>,
}

impl TemplatePolicy {
    /// Uniform initial policy.
    pub fn uniform(table: Arc<TemplateTable>) -> Self {
        Self::with_logits(table.clone(), vec![0.0; table.len()])
    }

    pub fn with_logits(table: Arc<TemplateTable>, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), table.len(), "one logit per template");
        Self { theta, table }
    }

    pub fn table(&self) -> &TemplateTable {
        &self.table
    }

    fn log_normalizer(&self) -> f64 {
        let max = self.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + self.theta.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let z = self.log_normalizer();
        self.theta.iter().map(|t| t - z).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn most_likely(&self) -> usize {
        self.theta
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &t)| if t > best.1 { (i, t) } else { best })
            .0
    }
}

impl Policy for TemplatePolicy {
    fn parameters(&self) -> &[f64] {
        &self.theta
    }

    fn set_parameters(&mut self, theta: &[f64]) {
        self.theta.copy_from_slice(theta);
    }

    fn log_prob(&self, _query: &str, output: &StructuredOutput) -> f64 {
        match self.table.position(&output.raw_text) {
            Some(i) => self.theta[i] - self.log_normalizer(),
            None => f64::NEG_INFINITY,
        }
    }

    fn sample(&self, _query: &str, rng: &mut dyn RngCore) -> StructuredOutput {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let probs = self.probabilities();
        let last = probs.len() - 1;
        for (i, p) in probs.into_iter().enumerate() {
            acc += p;
            if u < acc {
                return self.table.get(i).clone();
            }
        }
        self.table.get(last).clone()
    }

    /// `one_hot(k) − softmax(θ)`.
    fn log_prob_gradient(&self, _query: &str, output: &StructuredOutput) -> Vec<f64> {
        let mut g: Vec<f64> = self.probabilities().into_iter().map(|p| -p).collect();
        if let Some(i) = self.table.position(&output.raw_text) {
            g[i] += 1.0;
        }
        g
    }
}

/// Reward of every template in table order.
pub fn template_rewards<J: Judge>(
    scene: &GroundTruthSample,
    table: &TemplateTable,
    engine: &RewardEngine<J>,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    table.templates().iter().map(|t| engine.score(t, scene)).collect()
}

/// Best composite reward attainable by a point-mass policy over the table.
pub fn optimal_expected_reward<J: Judge>(
    scene: &GroundTruthSample,
    table: &TemplateTable,
    engine: &RewardEngine<J>,
) -> Result<f64, RewardError> {
    Ok(template_rewards(scene, table, engine)?
        .iter()
        .map(|r| r.composite)
        .fold(0.0, f64::max))
}

/// `Σ_k π(k) · r_k`.
pub fn expected_reward(policy: &TemplatePolicy, rewards: &[RewardBreakdown]) -> f64 {
    policy
        .probabilities()
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * r.composite)
        .sum()
}

/// Evaluation metrics of each template against the scene, in table order.
pub fn template_metrics(scene: &GroundTruthSample, table: &TemplateTable) -> Vec<MetricValues> {
    table
        .templates()
        .iter()
        .map(|t| {
            let s = score_sample(&t.triplets, &scene.gt_triplets);
            MetricValues {
                h_miou: s.h_miou(),
                o_miou: s.o_miou(),
                a_acc: s.a_acc(),
                map_rate: if s.success() { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

/// Metrics in expectation over the policy's output distribution.
pub fn expected_metrics(policy: &TemplatePolicy, per_template: &[MetricValues]) -> MetricValues {
    policy.probabilities().iter().zip(per_template).fold(
        MetricValues::default(),
        |acc, (p, m)| MetricValues {
            h_miou: acc.h_miou + p * m.h_miou,
            o_miou: acc.o_miou + p * m.o_miou,
            a_acc: acc.a_acc + p * m.a_acc,
            map_rate: acc.map_rate + p * m.map_rate,
        },
    )
}

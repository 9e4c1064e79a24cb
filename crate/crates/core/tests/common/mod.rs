//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use hoi_grpo::grammar;
use hoi_grpo::toy_env::{build_template_table, generate_scene, SceneSpec, TemplatePolicy, TemplateTable};
use hoi_grpo::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box with coordinates on the `1/k` grid, or continuous when `k` is 0.
pub fn random_box(rng: &mut impl Rng, k: usize) -> BoundingBox {
    if k == 0 {
        let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
        let (c, d) = (rng.gen::<f64>(), rng.gen::<f64>());
        if a == b || c == d {
            return BoundingBox::new(0.1, 0.1, 0.9, 0.9);
        }
        return BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d));
    }
    let x0 = rng.gen_range(0..k);
    let x1 = rng.gen_range(x0 + 1..=k);
    let y0 = rng.gen_range(0..k);
    let y1 = rng.gen_range(y0 + 1..=k);
    let k = k as f64;
    BoundingBox::new(x0 as f64 / k, y0 as f64 / k, x1 as f64 / k, y1 as f64 / k)
}

pub const VERBS: &[&str] = &["hold", "ride", "push", "kick", "sit on", "look at"];
pub const OBJECTS: &[&str] = &["cup", "bicycle", "ball", "book", "tennis racket"];

pub fn random_triplet(rng: &mut impl Rng, k: usize) -> HoiTriplet {
    HoiTriplet::new(
        *DEFAULT_HUMAN_SYNONYMS.choose(rng).unwrap(),
        *VERBS.choose(rng).unwrap(),
        *OBJECTS.choose(rng).unwrap(),
        random_box(rng, k),
        random_box(rng, k),
    )
}

/// Between `n.start()` and `n.end()` random triplets.
pub fn random_triplets(rng: &mut impl Rng, n: std::ops::RangeInclusive<usize>, k: usize) -> Vec<HoiTriplet> {
    let n = rng.gen_range(n);
    (0..n).map(|_| random_triplet(rng, k)).collect()
}

const WORDS: &[&str] = &[
    "locate", "the", "human", "person", "cup", "holds", "riding", "bicycle", "near", "left", "then",
    "object", "is", "a", "ball", "kicks", "3", "x=0.5",
];

pub fn random_step(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..8);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A random grammar-conforming output.
pub fn random_output(rng: &mut impl Rng) -> StructuredOutput {
    let steps = (0..rng.gen_range(1..6)).map(|_| random_step(rng)).collect();
    let k = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(2..20) };
    let triplets = random_triplets(rng, 1..=4, k);
    StructuredOutput::from_parts(CotTrace::new(steps), triplets)
}

/// Independent whole-text recognizer for the output grammar.
pub fn oracle_check_format(text: &str) -> bool {
    static DOC: OnceLock<Regex> = OnceLock::new();
    static LINE: OnceLock<Regex> = OnceLock::new();
    let doc = DOC.get_or_init(|| {
        Regex::new(r"(?s)\A\s*<think>(?P<think>.*)</think>\s*<answer>(?P<answer>.*)</answer>\s*\z").unwrap()
    });
    let num = r"\s*([0-9]+(?:\.[0-9]+)?)\s*";
    let line = LINE.get_or_init(|| {
        let label = r"([^,|()\n]*)";
        let bx = format!("{num},{num},{num},{num}");
        Regex::new(&format!(r"\A\s*\({label},{label},{label}\|{bx}\|{bx}\)\s*\z")).unwrap()
    });
    for tag in ["<think>", "</think>", "<answer>", "</answer>"] {
        if text.matches(tag).count() != 1 {
            return false;
        }
    }
    let Some(caps) = doc.captures(text) else {
        return false;
    };
    let think = caps.name("think").unwrap().as_str();
    let answer = caps.name("answer").unwrap().as_str();
    if !think.split('\n').any(|l| !l.trim().is_empty()) {
        return false;
    }
    let mut n_lines = 0;
    for l in answer.split('\n').filter(|l| !l.trim().is_empty()) {
        let Some(c) = line.captures(l) else {
            return false;
        };
        if (1..=3).any(|i| c[i].trim().is_empty()) {
            return false;
        }
        let v: Vec<f64> = (4..=11).map(|i| c[i].parse().unwrap()).collect();
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return false;
        }
        if !(v[0] < v[2] && v[1] < v[3] && v[4] < v[6] && v[5] < v[7]) {
            return false;
        }
        n_lines += 1;
    }
    n_lines > 0
}

const INSERTS: &[&str] = &[
    "<think>", "</think>", "<answer>", "</answer>", "(", ")", "|", ",", ".", "\n", " ", "0", "1", "5",
    "-", "e", "x", "<", ">", "/", "\t", "é", "2.", ".3", "1.5",
];

/// One random structural edit of `text`.
pub fn mutate(text: &str, rng: &mut impl Rng) -> String {
    let chars: Vec<char> = text.chars().collect();
    let pos = if chars.is_empty() { 0 } else { rng.gen_range(0..=chars.len()) };
    let head: String = chars[..pos].iter().collect();
    let tail: String = chars[pos..].iter().collect();
    match rng.gen_range(0..6) {
        0 if !tail.is_empty() => {
            let drop = rng.gen_range(1..=tail.chars().count().min(4));
            format!("{head}{}", tail.chars().skip(drop).collect::<String>())
        }
        1 => format!("{head}{}{tail}", INSERTS.choose(rng).unwrap()),
        2 if !tail.is_empty() => {
            let rest: String = tail.chars().skip(1).collect();
            format!("{head}{}{rest}", INSERTS.choose(rng).unwrap())
        }
        3 => {
            // swap two random chars
            let mut c = chars.clone();
            if c.len() >= 2 {
                let i = rng.gen_range(0..c.len());
                let j = rng.gen_range(0..c.len());
                c.swap(i, j);
            }
            c.into_iter().collect()
        }
        4 => format!("  {text}\n "),
        _ => {
            let n = rng.gen_range(1..4);
            let mut s = text.to_string();
            for _ in 0..n {
                s = mutate(&s, rng);
            }
            s
        }
    }
}

/// `iou` recomputed with the same float operation order as the library.
pub fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |x: &BoundingBox| (x.x_max - x.x_min) * (x.y_max - x.y_min);
    (inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0)
}

fn oracle_l1(a: &BoundingBox, b: &BoundingBox) -> f64 {
    ((a.x_min - b.x_min).abs() + (a.y_min - b.y_min).abs() + (a.x_max - b.x_max).abs() + (a.y_max - b.y_max).abs())
        / 4.0
}

/// Every injective partial assignment over positive-overlap pairs.
fn assignments(scores: &[Vec<f64>]) -> Vec<Vec<(usize, usize)>> {
    fn go(p: usize, scores: &[Vec<f64>], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if p == scores.len() {
            out.push(cur.clone());
            return;
        }
        go(p + 1, scores, used, cur, out);
        for g in 0..used.len() {
            if !used[g] && scores[p][g] > 0.0 {
                used[g] = true;
                cur.push((p, g));
                go(p + 1, scores, used, cur, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let n_gt = scores.first().map_or(0, |r| r.len());
    let mut out = Vec::new();
    go(0, scores, &mut vec![false; n_gt], &mut Vec::new(), &mut out);
    out
}

/// Ranks an assignment by its pairs sorted best-first: higher mean IoU, then
/// lower prediction index, then lower ground-truth index. A strict prefix
/// ranks below its extensions.
fn assignment_key(a: &[(usize, usize)], scores: &[Vec<f64>]) -> Vec<(f64, i64, i64)> {
    let mut k: Vec<(f64, i64, i64)> = a.iter().map(|&(p, g)| (scores[p][g], -(p as i64), -(g as i64))).collect();
    k.sort_by(|x, y| y.partial_cmp(x).unwrap());
    k
}

fn key_better(a: &[(f64, i64, i64)], b: &[(f64, i64, i64)]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Greater => return true,
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    a.len() > b.len()
}

/// Exhaustive detection reward: among all assignments, the one preferred
/// under the tie-break order, scored by the anchor rules.
pub fn oracle_detection(pred: &[HoiTriplet], gt: &[HoiTriplet], w: &RewardWeights) -> (f64, f64, f64) {
    if pred.is_empty() || gt.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let scores: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| {
            gt.iter()
                .map(|g| (oracle_iou(&p.human_box, &g.human_box) + oracle_iou(&p.object_box, &g.object_box)) / 2.0)
                .collect()
        })
        .collect();
    let all = assignments(&scores);
    let mut best = &all[0];
    let mut best_key = assignment_key(best, &scores);
    for a in &all[1..] {
        let k = assignment_key(a, &scores);
        if key_better(&k, &best_key) {
            best = a;
            best_key = k;
        }
    }
    let mut hit_iou = 0;
    let mut hit_reg = 0;
    for &(p, g) in best {
        for (a, b) in [(&pred[p].human_box, &gt[g].human_box), (&pred[p].object_box, &gt[g].object_box)] {
            if oracle_iou(a, b) >= w.iou_threshold {
                hit_iou += 1;
            }
            if oracle_l1(a, b) < w.delta {
                hit_reg += 1;
            }
        }
    }
    let n = (2 * gt.len()) as f64;
    let (ri, rr) = (hit_iou as f64 / n, hit_reg as f64 / n);
    (w.beta_det * ri + (1.0 - w.beta_det) * rr, ri, rr)
}

/// Per-sample best-assignment IoU means, recounted by hand.
pub fn oracle_map_rate(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    for (pred, gt) in preds.iter().zip(gts) {
        if gt.is_empty() {
            continue;
        }
        let scores: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| {
                gt.iter()
                    .map(|g| (oracle_iou(&p.human_box, &g.human_box) + oracle_iou(&p.object_box, &g.object_box)) / 2.0)
                    .collect()
            })
            .collect();
        let best = if pred.is_empty() {
            Vec::new()
        } else {
            let all = assignments(&scores);
            let mut best = all[0].clone();
            for a in &all[1..] {
                if key_better(&assignment_key(a, &scores), &assignment_key(&best, &scores)) {
                    best = a.clone();
                }
            }
            best
        };
        let mut h = 0.0;
        let mut o = 0.0;
        for &(p, g) in &best {
            h += oracle_iou(&pred[p].human_box, &gt[g].human_box);
            o += oracle_iou(&pred[p].object_box, &gt[g].object_box);
        }
        let n = gt.len() as f64;
        if h / n > 0.5 && o / n > 0.5 {
            hits += 1;
        }
    }
    hits as f64 / gts.len() as f64
}

/// A 16-template table over a seeded scene.
pub fn small_table(seed: u64) -> Arc<TemplateTable> {
    let spec = SceneSpec {
        verb_vocabulary: vec!["hold".into(), "ride".into()],
        object_vocabulary: vec!["cup".into(), "bicycle".into()],
        candidate_boxes: 2,
        rng_seed: seed,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    Arc::new(build_template_table(&spec, &scene).unwrap())
}

pub fn scene_for(seed: u64) -> GroundTruthSample {
    generate_scene(&SceneSpec {
        rng_seed: seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

pub fn random_logits(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// A rollout drawn from `old` with the given raw rewards, scored under
/// `current` and `reference`.
pub fn synthetic_rollout(
    rng: &mut impl Rng,
    old: &TemplatePolicy,
    current: &TemplatePolicy,
    reference: &TemplatePolicy,
    rewards: &[f64],
) -> grpo::GroupRollout {
    use hoi_grpo::grpo::{group_advantages, Policy};
    let query = GroundTruthSample {
        sample_id: "q".into(),
        query: "q".into(),
        annotation_scheme: AnnotationScheme::FineGrained,
        split: Split::Seen,
        gt_triplets: Vec::new(),
    };
    let adv = group_advantages(rewards, 1e-8);
    let samples = rewards
        .iter()
        .zip(adv)
        .map(|(&r, a)| {
            let output = old.sample("q", rng);
            let logp_old = old.log_prob("q", &output);
            let logp_current = current.log_prob("q", &output);
            GroupSample {
                logp_current,
                logp_old,
                logp_ref: reference.log_prob("q", &output),
                ratio: (logp_current - logp_old).exp(),
                reward: RewardBreakdown {
                    composite: r,
                    ..RewardBreakdown::default()
                },
                advantage: a,
                output,
            }
        })
        .collect();
    grpo::GroupRollout { query, samples }
}

/// Checks grammar outputs survive a render/parse cycle.
pub fn reparse(o: &StructuredOutput) -> StructuredOutput {
    grammar::parse_output(&grammar::serialize_output(o).unwrap())
}

pub struct FdCase {
    pub rel_err: f64,
    pub n_clipped: usize,
    pub n_samples: usize,
}

/// Compares the analytic objective gradient with central differences on a
/// random rollout. Configurations with a ratio within `1e-3` of a clip
/// boundary are redrawn so the objective is smooth around `θ`.
pub fn fd_gradient_case(seed: u64, h: f64) -> FdCase {
    use hoi_grpo::grpo::{grpo_objective, objective_gradient, refresh_rollout, Policy};
    let mut r = rng(seed);
    let table = small_table(seed);
    let n = table.len();
    let eps = 0.2;
    loop {
        let g = r.gen_range(2..=12);
        let beta = if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..0.5) };
        let theta_old = random_logits(&mut r, n, 2.0);
        let step = r.gen_range(0.05..0.6);
        let theta: Vec<f64> = theta_old.iter().map(|t| t + r.gen_range(-step..step)).collect();
        let old = TemplatePolicy::with_logits(table.clone(), theta_old);
        let cur = TemplatePolicy::with_logits(table.clone(), theta.clone());
        let reference = TemplatePolicy::with_logits(table.clone(), random_logits(&mut r, n, 2.0));
        let rewards: Vec<f64> = (0..g).map(|_| r.gen()).collect();
        let rollout = refresh_rollout(&synthetic_rollout(&mut r, &old, &cur, &reference, &rewards), &cur);
        if rollout
            .samples
            .iter()
            .any(|s| (s.ratio - (1.0 - eps)).abs() < 1e-3 || (s.ratio - (1.0 + eps)).abs() < 1e-3)
        {
            continue;
        }
        let n_clipped = rollout
            .samples
            .iter()
            .filter(|s| {
                grpo::clipped_surrogate_term(s.ratio, s.advantage, eps) != s.ratio * s.advantage
            })
            .count();
        let analytic = objective_gradient(&rollout, &cur, beta, eps);
        let mut p = cur.clone();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for j in 0..n {
            let mut t = theta.clone();
            t[j] += h;
            p.set_parameters(&t);
            let up = grpo_objective(&refresh_rollout(&rollout, &p), beta, eps);
            t[j] -= 2.0 * h;
            p.set_parameters(&t);
            let down = grpo_objective(&refresh_rollout(&rollout, &p), beta, eps);
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - analytic[j]).powi(2);
            norm2 += fd.powi(2).max(analytic[j].powi(2));
        }
        return FdCase {
            rel_err: diff2.sqrt() / norm2.sqrt().max(1e-6),
            n_clipped,
            n_samples: g,
        };
    }
}

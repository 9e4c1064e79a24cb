//! Format, detection, interaction and CoT rewards and their composite.
//!
//! Predictions are assigned to ground truth by [`match_predictions`]. Each
//! ground-truth triplet contributes two anchors (human box, object box) to
//! the detection reward; unmatched ground truth counts as a miss in every
//! fraction, extra predictions are ignored.

use std::cmp::Ordering;

use crate::grammar;
use crate::judge::{Judge, JudgeError, JudgeRequest, JudgeResponse};
use crate::types::{
    labels_match, BoundingBox, GroundTruthSample, HoiTriplet, RewardBreakdown, RewardWeights,
    StructuredOutput,
};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("empty {0} score list")]
    EmptyScores(&'static str),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// 1 iff the text conforms to the output grammar.
pub fn format_reward(text: &str) -> f64 {
    if grammar::check_format(text) {
        1.0
    } else {
        0.0
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Mean of human-box and object-box IoU.
pub fn pair_score(pred: &HoiTriplet, gt: &HoiTriplet) -> f64 {
    (iou(&pred.human_box, &gt.human_box) + iou(&pred.object_box, &gt.object_box)) / 2.0
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// (prediction index, ground-truth index), in acceptance order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

impl Matching {
    /// Matched prediction index for each ground-truth index.
    pub fn by_ground_truth(&self, n_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_gt];
        for &(p, g) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }
}

/// Greedy assignment by descending mean box IoU, ties broken by lower
/// prediction index then lower ground-truth index. Pairs with zero mean IoU
/// are never matched.
pub fn match_predictions(pred: &[HoiTriplet], gt: &[HoiTriplet]) -> Matching {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * gt.len());
    for (p, pt) in pred.iter().enumerate() {
        for (g, gt_t) in gt.iter().enumerate() {
            let s = pair_score(pt, gt_t);
            if s > 0.0 {
                candidates.push((s, p, g));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, p, g) in candidates {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }
    Matching {
        pairs,
        unmatched_predictions: (0..pred.len()).filter(|&p| !pred_used[p]).collect(),
        unmatched_ground_truth: (0..gt.len()).filter(|&g| !gt_used[g]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub r_det: f64,
    pub r_iou: f64,
    pub r_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionScore {
    pub r_int: f64,
    pub r_act: f64,
    pub r_obj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotScore {
    pub r_cot: f64,
    pub r_prm: f64,
    pub r_grm: f64,
}

/// Detection reward over the matched anchors, denominated by the number of
/// ground-truth anchors.
pub fn detection_reward(pred: &[HoiTriplet], gt: &[HoiTriplet], w: &RewardWeights) -> DetectionScore {
    let matching = match_predictions(pred, gt);
    detection_reward_with(pred, gt, &matching, w)
}

/// [`detection_reward`] for a precomputed matching.
pub fn detection_reward_with(
    pred: &[HoiTriplet],
    gt: &[HoiTriplet],
    matching: &Matching,
    w: &RewardWeights,
) -> DetectionScore {
    if pred.is_empty() || gt.is_empty() {
        return DetectionScore {
            r_det: 0.0,
            r_iou: 0.0,
            r_reg: 0.0,
        };
    }
    let anchors = 2 * gt.len();
    let mut overlap_hits = 0usize;
    let mut precise_hits = 0usize;
    for &(p, g) in &matching.pairs {
        for (pb, gb) in [
            (&pred[p].human_box, &gt[g].human_box),
            (&pred[p].object_box, &gt[g].object_box),
        ] {
            if iou(pb, gb) >= w.iou_threshold {
                overlap_hits += 1;
            }
            if pb.mean_l1(gb) < w.delta {
                precise_hits += 1;
            }
        }
    }
    let r_iou = overlap_hits as f64 / anchors as f64;
    let r_reg = precise_hits as f64 / anchors as f64;
    DetectionScore {
        r_det: w.beta_det * r_iou + (1.0 - w.beta_det) * r_reg,
        r_iou,
        r_reg,
    }
}

/// Fractions of ground-truth triplets whose matched prediction carries the
/// exact verb / object label.
pub fn interaction_reward(
    pred: &[HoiTriplet],
    gt: &[HoiTriplet],
    matching: &Matching,
    w: &RewardWeights,
) -> InteractionScore {
    if gt.is_empty() {
        return InteractionScore {
            r_int: 0.0,
            r_act: 0.0,
            r_obj: 0.0,
        };
    }
    let by_gt = matching.by_ground_truth(gt.len());
    let mut act = 0usize;
    let mut obj = 0usize;
    for (g, m) in by_gt.iter().enumerate() {
        if let Some(p) = *m {
            if labels_match(&pred[p].verb_label, &gt[g].verb_label) {
                act += 1;
            }
            if labels_match(&pred[p].object_label, &gt[g].object_label) {
                obj += 1;
            }
        }
    }
    let r_act = act as f64 / gt.len() as f64;
    let r_obj = obj as f64 / gt.len() as f64;
    InteractionScore {
        r_int: w.gamma * r_act + (1.0 - w.gamma) * r_obj,
        r_act,
        r_obj,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean step score blended with mean group score.
pub fn cot_reward(prm_scores: &[f64], grm_scores: &[f64], w: &RewardWeights) -> Result<CotScore, RewardError> {
    if prm_scores.is_empty() {
        return Err(RewardError::EmptyScores("PRM"));
    }
    if grm_scores.is_empty() {
        return Err(RewardError::EmptyScores("GRM"));
    }
    let r_prm = mean(prm_scores);
    let r_grm = mean(grm_scores);
    Ok(CotScore {
        r_cot: w.lambda_cot * r_prm + (1.0 - w.lambda_cot) * r_grm,
        r_prm,
        r_grm,
    })
}

/// All four rewards and their weighted sum.
///
/// A format-invalid output scores zero on every task reward. `judge_scores`
/// of `None` (or empty score lists) for a valid output scores the CoT term
/// as zero.
pub fn composite_reward(
    output: &StructuredOutput,
    gt: &[HoiTriplet],
    judge_scores: Option<&JudgeResponse>,
    w: &RewardWeights,
) -> RewardBreakdown {
    let r_format = format_reward(&output.raw_text);
    if r_format == 0.0 {
        return RewardBreakdown::default();
    }
    let pred = &output.triplets;
    let matching = match_predictions(pred, gt);
    let det = detection_reward_with(pred, gt, &matching, w);
    let int = interaction_reward(pred, gt, &matching, w);
    let cot = judge_scores
        .and_then(|s| cot_reward(&s.step_scores, &s.group_scores, w).ok())
        .unwrap_or(CotScore {
            r_cot: 0.0,
            r_prm: 0.0,
            r_grm: 0.0,
        });
    let c = &w.composite;
    let composite =
        c.format * r_format + c.detection * det.r_det + c.interaction * int.r_int + c.cot * cot.r_cot;
    RewardBreakdown {
        r_format,
        r_det: det.r_det,
        r_int: int.r_int,
        r_cot: cot.r_cot,
        r_iou_component: det.r_iou,
        r_reg_component: det.r_reg,
        r_act_component: int.r_act,
        r_obj_component: int.r_obj,
        r_prm_component: cot.r_prm,
        r_grm_component: cot.r_grm,
        composite: composite.clamp(0.0, 1.0),
    }
}

/// Scores outputs against a sample, asking a judge for the CoT term.
pub struct RewardEngine<J> {
    pub weights: RewardWeights,
    pub judge: J,
}

impl<J: Judge> RewardEngine<J> {
    pub fn new(weights: RewardWeights, judge: J) -> Self {
        Self { weights, judge }
    }

    pub fn judge_request(&self, output: &StructuredOutput, sample: &GroundTruthSample) -> JudgeRequest {
        JudgeRequest::new(
            sample.query.clone(),
            output.trace.clone(),
            sample.gt_triplets.clone(),
            self.weights.grm_group_size,
        )
    }

    /// Full breakdown. Judge errors are returned to the caller, who decides
    /// on the fallback (see [`crate::judge::FallbackJudge`]).
    pub fn score(&self, output: &StructuredOutput, sample: &GroundTruthSample) -> Result<RewardBreakdown, RewardError> {
        if !output.format_valid {
            return Ok(RewardBreakdown::default());
        }
        let scores = self.judge.score(&self.judge_request(output, sample))?;
        cot_reward(&scores.step_scores, &scores.group_scores, &self.weights)?;
        Ok(composite_reward(output, &sample.gt_triplets, Some(&scores), &self.weights))
    }
}

//! Corpus evaluation: H-mIOU, O-mIOU, A-ACC and the per-sample success rate
//! reported as mAP.
//!
//! `map_rate` is a success rate, not ranked average precision: a sample
//! succeeds when its mean human-box IoU and mean object-box IoU both
//! strictly exceed 0.5. Verb correctness plays no part in it.
//!
//! H-mIOU, O-mIOU and A-ACC average over every ground-truth triplet in the
//! corpus; unmatched ground truth contributes IoU 0 and an incorrect verb.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::grammar;
use crate::reward::{iou, match_predictions};
use crate::types::{labels_match, AnnotationScheme, GroundTruthSample, HoiTriplet, Split};

/// Success threshold on the per-sample mean IoUs (strict).
pub const SUCCESS_IOU: f64 = 0.5;

/// Per-ground-truth-triplet outcomes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub human_ious: Vec<f64>,
    pub object_ious: Vec<f64>,
    pub verb_correct: Vec<bool>,
}

impl SampleScores {
    pub fn n_gt(&self) -> usize {
        self.human_ious.len()
    }

    fn mean(xs: &[f64]) -> f64 {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    }

    pub fn h_miou(&self) -> f64 {
        Self::mean(&self.human_ious)
    }

    pub fn o_miou(&self) -> f64 {
        Self::mean(&self.object_ious)
    }

    pub fn a_acc(&self) -> f64 {
        if self.verb_correct.is_empty() {
            return 0.0;
        }
        self.verb_correct.iter().filter(|c| **c).count() as f64 / self.verb_correct.len() as f64
    }

    pub fn success(&self) -> bool {
        self.h_miou() > SUCCESS_IOU && self.o_miou() > SUCCESS_IOU
    }
}

/// Matches predictions to ground truth and records per-triplet outcomes.
pub fn score_sample(pred: &[HoiTriplet], gt: &[HoiTriplet]) -> SampleScores {
    let by_gt = match_predictions(pred, gt).by_ground_truth(gt.len());
    let mut s = SampleScores {
        human_ious: Vec::with_capacity(gt.len()),
        object_ious: Vec::with_capacity(gt.len()),
        verb_correct: Vec::with_capacity(gt.len()),
    };
    for (g, m) in by_gt.into_iter().enumerate() {
        match m {
            Some(p) => {
                s.human_ious.push(iou(&pred[p].human_box, &gt[g].human_box));
                s.object_ious.push(iou(&pred[p].object_box, &gt[g].object_box));
                s.verb_correct
                    .push(labels_match(&pred[p].verb_label, &gt[g].verb_label));
            }
            None => {
                s.human_ious.push(0.0);
                s.object_ious.push(0.0);
                s.verb_correct.push(false);
            }
        }
    }
    s
}

fn corpus_scores(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> Vec<SampleScores> {
    preds.iter().zip(gts).map(|(p, g)| score_sample(p, g)).collect()
}

fn triplet_mean(scores: &[SampleScores], f: impl Fn(&SampleScores) -> Vec<f64>) -> f64 {
    let all: Vec<f64> = scores.iter().flat_map(f).collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

/// Mean human-box IoU over every ground-truth triplet in the corpus.
pub fn h_miou(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> f64 {
    triplet_mean(&corpus_scores(preds, gts), |s| s.human_ious.clone())
}

/// Mean object-box IoU over every ground-truth triplet in the corpus.
pub fn o_miou(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> f64 {
    triplet_mean(&corpus_scores(preds, gts), |s| s.object_ious.clone())
}

/// Fraction of ground-truth triplets whose matched prediction has the right verb.
pub fn a_acc(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> f64 {
    triplet_mean(&corpus_scores(preds, gts), |s| {
        s.verb_correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    })
}

/// Fraction of samples whose mean human and object IoUs both exceed 0.5.
pub fn map_rate(preds: &[Vec<HoiTriplet>], gts: &[Vec<HoiTriplet>]) -> f64 {
    let scores = corpus_scores(preds, gts);
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| s.success()).count() as f64 / scores.len() as f64
}

/// A prediction record: either raw model text or explicit triplets.
///
/// Dataset records (`gt` field) are accepted as predictions too, so a corpus
/// can be evaluated against itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    #[serde(default, alias = "gt", skip_serializing_if = "Option::is_none")]
    pub triplets: Option<Vec<HoiTriplet>>,
}

impl PredictionRecord {
    pub fn from_text(sample_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            output_text: Some(text.into()),
            triplets: None,
        }
    }

    /// Predicted triplets; unparseable text predicts nothing.
    pub fn predicted_triplets(&self) -> Vec<HoiTriplet> {
        if let Some(t) = &self.triplets {
            return t.clone();
        }
        self.output_text
            .as_deref()
            .map(|text| grammar::parse_output(text).triplets)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub h_miou: f64,
    pub o_miou: f64,
    pub a_acc: f64,
    pub map_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_scheme: Option<AnnotationScheme>,
    pub n_gt: usize,
    pub h_miou: f64,
    pub o_miou: f64,
    pub a_acc: f64,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleRow {
    pub fn error(sample_id: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            split: None,
            annotation_scheme: None,
            n_gt: 0,
            h_miou: 0.0,
            o_miou: 0.0,
            a_acc: 0.0,
            success: false,
            error: Some(message.into()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub annotation_scheme: AnnotationScheme,
    pub split: Split,
    pub n_samples: usize,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub h_miou: f64,
    pub o_miou: f64,
    pub a_acc: f64,
    pub map_rate: f64,
    pub n_samples: usize,
    pub n_errors: usize,
    pub rows: Vec<SampleRow>,
    pub breakdown: Vec<BreakdownCell>,
}

/// Aggregates scored rows. Triplet-level metrics are weighted by `n_gt`;
/// `map_rate` is the plain mean over samples. Error rows are skipped.
pub fn aggregate(rows: &[SampleRow]) -> MetricValues {
    let ok: Vec<&SampleRow> = rows.iter().filter(|r| !r.is_error()).collect();
    let n_gt: usize = ok.iter().map(|r| r.n_gt).sum();
    if ok.is_empty() || n_gt == 0 {
        return MetricValues::default();
    }
    let weighted = |f: fn(&SampleRow) -> f64| {
        ok.iter().map(|r| f(r) * r.n_gt as f64).sum::<f64>() / n_gt as f64
    };
    MetricValues {
        h_miou: weighted(|r| r.h_miou),
        o_miou: weighted(|r| r.o_miou),
        a_acc: weighted(|r| r.a_acc),
        map_rate: ok.iter().filter(|r| r.success).count() as f64 / ok.len() as f64,
    }
}

/// Scores every prediction against its ground truth by `sample_id`.
///
/// Rows follow ground-truth order. Predictions without ground truth,
/// ground truth without prediction, and duplicate predictions become error
/// rows; the run continues.
pub fn evaluate(preds: &[PredictionRecord], gts: &[GroundTruthSample]) -> EvalReport {
    let gt_ids: HashMap<&str, usize> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (g.sample_id.as_str(), i))
        .collect();
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    let mut extra_rows = Vec::new();
    for p in preds {
        if !gt_ids.contains_key(p.sample_id.as_str()) {
            extra_rows.push(SampleRow::error(&p.sample_id, "no ground truth for sample_id"));
        } else if by_id.insert(p.sample_id.as_str(), p).is_some() {
            extra_rows.push(SampleRow::error(&p.sample_id, "duplicate prediction"));
        }
    }

    let mut rows: Vec<SampleRow> = gts
        .iter()
        .map(|g| match by_id.get(g.sample_id.as_str()) {
            None => SampleRow::error(&g.sample_id, "no prediction for sample_id"),
            Some(p) => {
                let s = score_sample(&p.predicted_triplets(), &g.gt_triplets);
                SampleRow {
                    sample_id: g.sample_id.clone(),
                    split: Some(g.split),
                    annotation_scheme: Some(g.annotation_scheme),
                    n_gt: s.n_gt(),
                    h_miou: s.h_miou(),
                    o_miou: s.o_miou(),
                    a_acc: s.a_acc(),
                    success: s.success(),
                    error: None,
                }
            }
        })
        .collect();
    rows.extend(extra_rows);
    report_from_rows(rows)
}

pub fn report_from_rows(rows: Vec<SampleRow>) -> EvalReport {
    let all = aggregate(&rows);
    let mut cells: BTreeMap<(AnnotationScheme, Split), Vec<SampleRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_error()) {
        if let (Some(scheme), Some(split)) = (r.annotation_scheme, r.split) {
            cells.entry((scheme, split)).or_default().push(r.clone());
        }
    }
    let breakdown = cells
        .into_iter()
        .map(|((annotation_scheme, split), rs)| BreakdownCell {
            annotation_scheme,
            split,
            n_samples: rs.len(),
            metrics: aggregate(&rs),
        })
        .collect();
    let n_errors = rows.iter().filter(|r| r.is_error()).count();
    EvalReport {
        h_miou: all.h_miou,
        o_miou: all.o_miou,
        a_acc: all.a_acc,
        map_rate: all.map_rate,
        n_samples: rows.len() - n_errors,
        n_errors,
        rows,
        breakdown,
    }
}

impl EvalReport {
    pub fn metrics(&self) -> MetricValues {
        MetricValues {
            h_miou: self.h_miou,
            o_miou: self.o_miou,
            a_acc: self.a_acc,
            map_rate: self.map_rate,
        }
    }

    /// Aligned text table: one row per annotation scheme, seen and unseen
    /// column groups, then the overall line.
    pub fn text_table(&self) -> String {
        let fmt_cell = |m: Option<&MetricValues>| match m {
            Some(m) => format!(
                "{:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                m.h_miou, m.o_miou, m.a_acc, m.map_rate
            ),
            None => format!("{:>7} {:>7} {:>7} {:>7}", "-", "-", "-", "-"),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} | {:^31} | {:^31}",
            "scheme", "seen", "unseen"
        );
        let head = format!("{:>7} {:>7} {:>7} {:>7}", "H-mIOU", "O-mIOU", "A-ACC", "mAP");
        let _ = writeln!(out, "{:<16} | {} | {}", "", head, head);
        for scheme in AnnotationScheme::ALL {
            let find = |split| {
                self.breakdown
                    .iter()
                    .find(|c| c.annotation_scheme == scheme && c.split == split)
                    .map(|c| &c.metrics)
            };
            let _ = writeln!(
                out,
                "{:<16} | {} | {}",
                scheme.as_str(),
                fmt_cell(find(Split::Seen)),
                fmt_cell(find(Split::Unseen))
            );
        }
        let _ = writeln!(
            out,
            "overall: H-mIOU {:.4}  O-mIOU {:.4}  A-ACC {:.4}  mAP {:.4}  ({} samples, {} errors)",
            self.h_miou, self.o_miou, self.a_acc, self.map_rate, self.n_samples, self.n_errors
        );
        out
    }
}

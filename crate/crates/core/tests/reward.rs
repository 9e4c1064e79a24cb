mod common;

use common::*;
use hoi_grpo::judge::{JudgeResponse, ReferenceJudge};
use hoi_grpo::metrics::{map_rate, score_sample};
use hoi_grpo::reward::*;
use hoi_grpo::*;
use proptest::prelude::*;
use rand::Rng;

fn weights_from(r: &mut impl Rng) -> RewardWeights {
    let raw: Vec<f64> = (0..4).map(|_| r.gen::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut composite = CompositeWeights {
        format: raw[0] / total,
        detection: raw[1] / total,
        interaction: raw[2] / total,
        cot: 0.0,
    };
    composite.cot = 1.0 - composite.format - composite.detection - composite.interaction;
    RewardWeights {
        beta_det: r.gen(),
        gamma: r.gen(),
        lambda_cot: r.gen(),
        delta: r.gen_range(0.01..0.5),
        composite,
        ..RewardWeights::default()
    }
}

fn scene_pair(r: &mut impl Rng) -> (Vec<HoiTriplet>, Vec<HoiTriplet>) {
    let k = [0, 2, 4, 8][r.gen_range(0..4)];
    let gt = random_triplets(r, 1..=4, k);
    let mut pred = random_triplets(r, 0..=4, k);
    // bias toward overlap so anchors are actually hit
    for p in pred.iter_mut() {
        if r.gen_bool(0.5) {
            let g = &gt[r.gen_range(0..gt.len())];
            p.human_box = g.human_box;
            if r.gen_bool(0.5) {
                p.object_box = g.object_box;
            }
            if r.gen_bool(0.5) {
                p.verb_label = g.verb_label.clone();
            }
        }
    }
    (pred, gt)
}

#[test]
fn detection_matches_exhaustive_oracle() {
    let mut r = rng(10);
    for _ in 0..3_000 {
        let (pred, gt) = scene_pair(&mut r);
        let w = weights_from(&mut r);
        let got = detection_reward(&pred, &gt, &w);
        let (det, ri, rr) = oracle_detection(&pred, &gt, &w);
        assert_eq!((got.r_det, got.r_iou, got.r_reg), (det, ri, rr), "{pred:?} {gt:?}");
    }
}

#[test]
fn map_rate_matches_recount() {
    let mut r = rng(11);
    for _ in 0..300 {
        let n = r.gen_range(1..=20);
        let (preds, gts): (Vec<_>, Vec<_>) = (0..n).map(|_| scene_pair(&mut r)).unzip();
        assert_eq!(map_rate(&preds, &gts), oracle_map_rate(&preds, &gts));
    }
}

#[test]
fn iou_examples() {
    let a = BoundingBox::new(0.0, 0.0, 0.5, 0.5);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BoundingBox::new(0.5, 0.0, 1.0, 0.5)), 0.0);
    let b = BoundingBox::new(0.25, 0.0, 0.75, 0.5);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn exact_prediction_scores_one() {
    let mut r = rng(12);
    let w = RewardWeights::default();
    for _ in 0..200 {
        let gt = random_triplets(&mut r, 1..=4, 8);
        let det = detection_reward(&gt, &gt, &w);
        assert_eq!((det.r_iou, det.r_reg, det.r_det), (1.0, 1.0, 1.0));
        let m = match_predictions(&gt, &gt);
        assert_eq!(interaction_reward(&gt, &gt, &m, &w).r_int, 1.0);
        let s = score_sample(&gt, &gt);
        assert_eq!((s.h_miou(), s.o_miou(), s.a_acc()), (1.0, 1.0, 1.0));
    }
}

#[test]
fn invalid_format_zeroes_everything() {
    let gt = random_triplets(&mut rng(13), 2..=2, 8);
    let scores = JudgeResponse {
        step_scores: vec![1.0],
        group_scores: vec![1.0],
    };
    let b = composite_reward(&StructuredOutput::invalid("nope"), &gt, Some(&scores), &RewardWeights::default());
    assert_eq!(b, RewardBreakdown::default());
}

#[test]
fn engine_breakdown_is_consistent() {
    let mut r = rng(14);
    let engine = RewardEngine::new(RewardWeights::default(), ReferenceJudge::default());
    for i in 0..200 {
        let scene = scene_for(i);
        let mut o = random_output(&mut r);
        if r.gen_bool(0.5) {
            o.triplets = scene.gt_triplets.clone();
            o = StructuredOutput::from_parts(o.trace, o.triplets);
        }
        let b = engine.score(&o, &scene).unwrap();
        assert!(b.validate_with(&engine.weights).is_empty(), "{:?}", b.validate_with(&engine.weights));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn terms_are_affine_blends(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (pred, gt) = scene_pair(&mut r);
        let w = weights_from(&mut r);
        let m = match_predictions(&pred, &gt);
        let d = detection_reward_with(&pred, &gt, &m, &w);
        prop_assert!((d.r_det - (w.beta_det * d.r_iou + (1.0 - w.beta_det) * d.r_reg)).abs() < 1e-12);
        let i = interaction_reward(&pred, &gt, &m, &w);
        prop_assert!((i.r_int - (w.gamma * i.r_act + (1.0 - w.gamma) * i.r_obj)).abs() < 1e-12);
        let prm: Vec<f64> = (0..r.gen_range(1..6)).map(|_| r.gen()).collect();
        let grm: Vec<f64> = (0..r.gen_range(1..4)).map(|_| r.gen()).collect();
        let c = cot_reward(&prm, &grm, &w).unwrap();
        prop_assert!((c.r_cot - (w.lambda_cot * c.r_prm + (1.0 - w.lambda_cot) * c.r_grm)).abs() < 1e-12);
        for v in [d.r_det, d.r_iou, d.r_reg, i.r_int, i.r_act, i.r_obj, c.r_cot] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn composite_is_weighted_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (_, gt) = scene_pair(&mut r);
        let out = random_output(&mut r);
        let w = weights_from(&mut r);
        let scores = JudgeResponse {
            step_scores: (0..out.trace.len()).map(|_| r.gen()).collect(),
            group_scores: vec![r.gen()],
        };
        let b = composite_reward(&out, &gt, Some(&scores), &w);
        let c = &w.composite;
        let expect = c.format * b.r_format + c.detection * b.r_det + c.interaction * b.r_int + c.cot * b.r_cot;
        prop_assert!((b.composite - expect).abs() < 1e-12);
        prop_assert!(b.validate_with(&w).is_empty());
    }

    #[test]
    fn order_of_predictions_does_not_matter(seed in any::<u64>()) {
        // continuous boxes make exact score ties vanishingly rare
        let mut r = rng(seed);
        let gt = random_triplets(&mut r, 1..=4, 0);
        let mut pred = random_triplets(&mut r, 1..=4, 0);
        let w = RewardWeights::default();
        let a = detection_reward(&pred, &gt, &w);
        pred.reverse();
        let b = detection_reward(&pred, &gt, &w);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn disjoint_extras_do_not_change_reward(seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt: Vec<HoiTriplet> = random_triplets(&mut r, 1..=3, 8)
            .into_iter()
            .map(|mut t| {
                // keep ground truth in the left half
                t.human_box = BoundingBox::new(t.human_box.x_min / 2.0, t.human_box.y_min, t.human_box.x_max / 2.0, t.human_box.y_max);
                t.object_box = BoundingBox::new(t.object_box.x_min / 2.0, t.object_box.y_min, t.object_box.x_max / 2.0, t.object_box.y_max);
                t
            })
            .collect();
        let mut pred = gt.clone();
        pred.truncate(r.gen_range(1..=gt.len()));
        let w = RewardWeights::default();
        let before = detection_reward(&pred, &gt, &w);
        let far = BoundingBox::new(0.6, 0.0, 1.0, 1.0);
        pred.push(HoiTriplet::new("human", "hold", "cup", far, far));
        prop_assert_eq!(before, detection_reward(&pred, &gt, &w));
    }

    #[test]
    fn more_matched_truth_never_hurts_interaction(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (mut pred, gt) = scene_pair(&mut r);
        let w = RewardWeights::default();
        let m = match_predictions(&pred, &gt);
        let before = interaction_reward(&pred, &gt, &m, &w);
        // fixing the labels of a matched prediction keeps the matching
        if let Some(&(p, g)) = m.pairs.first() {
            pred[p].verb_label = gt[g].verb_label.clone();
            pred[p].object_label = gt[g].object_label.clone();
        }
        let m2 = match_predictions(&pred, &gt);
        prop_assert_eq!(&m, &m2);
        prop_assert!(interaction_reward(&pred, &gt, &m2, &w).r_int >= before.r_int);
    }
}

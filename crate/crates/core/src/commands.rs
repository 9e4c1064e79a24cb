//! Command implementations behind the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, JudgeKind, RunConfig};
use crate::dataset::{self, DatasetError, OutputRecord};
use crate::grammar::parse_output;
use crate::grpo::{sample_rng, train, IterationRecord, TrainError, TrainOutcome};
use crate::judge::{ExternalJudge, FallbackJudge, Judge, JudgeError, ReferenceJudge};
use crate::metrics::{self, EvalReport, MetricValues, PredictionRecord, SampleRow};
use crate::reward::{RewardEngine, RewardError};
use crate::toy_env::{
    build_template_table, expected_metrics, expected_reward, generate_scene, template_metrics,
    template_rewards, TemplatePolicy, TemplateTable, ToyError,
};
use crate::types::{GroundTruthSample, RewardBreakdown, RewardWeights, Validate};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Missing(&'static str),
}

pub type SharedJudge = Arc<dyn Judge>;

/// The configured judge. An external judge falls back to the reference
/// judge on any failure.
pub fn build_judge(cfg: &RunConfig) -> Result<SharedJudge, CommandError> {
    let reference = ReferenceJudge::default();
    match cfg.judge {
        JudgeKind::Reference => Ok(Arc::new(reference)),
        JudgeKind::External => {
            let endpoint = cfg
                .endpoint()
                .ok_or(CommandError::Missing("judge = external requires judge_endpoint"))?;
            let external = ExternalJudge::new(endpoint)?;
            Ok(Arc::new(FallbackJudge::new(external, reference)))
        }
    }
}

fn derive_seed(seed: u64, stream: usize, index: usize) -> u64 {
    sample_rng(seed, usize::MAX, stream, index).next_u64()
}

const SCENE_STREAM: usize = 0;
const TABLE_STREAM: usize = 1;
const TRAIN_STREAM: usize = 2;

fn ensure_dir(dir: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir).map_err(|source| CommandError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// `cfg.n_scenes` toy scenes derived from the run seed.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<Vec<GroundTruthSample>, CommandError> {
    (0..cfg.n_scenes)
        .map(|i| {
            let mut spec = cfg.scene.clone();
            spec.rng_seed = derive_seed(cfg.seed(), SCENE_STREAM, i);
            let mut scene = generate_scene(&spec)?;
            scene.sample_id = format!("scene-{i:04}");
            Ok(scene)
        })
        .collect()
}

/// The configured dataset, or a synthetic one when none is set.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Vec<GroundTruthSample>, CommandError> {
    match &cfg.dataset {
        Some(path) => Ok(dataset::load_dataset(path)?),
        None => synthetic_dataset(cfg),
    }
}

fn require_dataset(cfg: &RunConfig) -> Result<Vec<GroundTruthSample>, CommandError> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or(CommandError::Missing("dataset path is required"))?;
    Ok(dataset::load_dataset(path)?)
}

/// Writes a synthetic corpus to `<out_dir>/dataset.jsonl`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let scenes = synthetic_dataset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("dataset.jsonl");
    dataset::write_jsonl(&path, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), path.display());
    Ok(path)
}

/// Result of optimizing one sample's template policy.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub sample: GroundTruthSample,
    pub table: Arc<TemplateTable>,
    pub policy: TemplatePolicy,
    pub outcome: TrainOutcome,
}

/// Template table for the `index`-th sample of a run.
pub fn sample_table(
    cfg: &RunConfig,
    sample: &GroundTruthSample,
    index: usize,
) -> Result<Arc<TemplateTable>, CommandError> {
    let mut spec = cfg.scene.clone();
    spec.rng_seed = derive_seed(cfg.seed(), TABLE_STREAM, index);
    Ok(Arc::new(build_template_table(&spec, sample)?))
}

/// Trains a fresh uniform policy on one sample under `weights`.
/// `replicate` selects an independent sampling stream.
pub fn train_sample(
    cfg: &RunConfig,
    weights: RewardWeights,
    judge: &SharedJudge,
    sample: &GroundTruthSample,
    index: usize,
    replicate: usize,
) -> Result<SampleRun, CommandError> {
    let table = sample_table(cfg, sample, index)?;
    let mut policy = TemplatePolicy::uniform(table.clone());
    let engine = RewardEngine::new(weights, judge.clone());
    let mut grpo = cfg.grpo;
    grpo.rng_seed = derive_seed(cfg.seed(), TRAIN_STREAM + replicate, index);
    let outcome = train(&mut policy, std::slice::from_ref(sample), &engine, &grpo)?;
    Ok(SampleRun {
        sample: sample.clone(),
        table,
        policy,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub sample_id: String,
    #[serde(flatten)]
    pub record: IterationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub sample_id: String,
    pub parameters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummaryRow {
    pub sample_id: String,
    pub n_templates: usize,
    pub expected_reward: f64,
    pub optimal_reward: f64,
    pub prediction: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub runs: Vec<SampleRun>,
    pub summary: Vec<TrainSummaryRow>,
    pub out_dir: PathBuf,
}

impl TrainReport {
    pub fn history(&self) -> Vec<HistoryRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.outcome.history.iter().map(|rec| HistoryRow {
                    sample_id: r.sample.sample_id.clone(),
                    record: rec.clone(),
                })
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<ParameterRow> {
        self.runs
            .iter()
            .map(|r| ParameterRow {
                sample_id: r.sample.sample_id.clone(),
                parameters: r.outcome.parameters.clone(),
            })
            .collect()
    }
}

/// Trains one policy per sample and writes `history.jsonl`,
/// `parameters.jsonl`, `predictions.jsonl` (most likely template per
/// sample) and `train_summary.json` under `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport, CommandError> {
    let samples = load_or_generate(cfg)?;
    let judge = build_judge(cfg)?;
    let runs = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| train_sample(cfg, cfg.weights, &judge, s, i, 0))
        .collect::<Result<Vec<_>, _>>()?;

    let engine = RewardEngine::new(cfg.weights, judge.clone());
    let mut summary = Vec::with_capacity(runs.len());
    let mut predictions = Vec::with_capacity(runs.len());
    for run in &runs {
        let rewards = template_rewards(&run.sample, &run.table, &engine)?;
        let best = run.table.get(run.policy.most_likely()).raw_text.clone();
        summary.push(TrainSummaryRow {
            sample_id: run.sample.sample_id.clone(),
            n_templates: run.table.len(),
            expected_reward: expected_reward(&run.policy, &rewards),
            optimal_reward: rewards.iter().map(|r| r.composite).fold(0.0, f64::max),
            prediction: best.clone(),
        });
        predictions.push(PredictionRecord::from_text(&run.sample.sample_id, best));
    }

    let report = TrainReport {
        runs,
        summary,
        out_dir: cfg.out_dir.clone(),
    };
    ensure_dir(&cfg.out_dir)?;
    dataset::write_jsonl(&cfg.out_dir.join("history.jsonl"), &report.history())?;
    dataset::write_jsonl(&cfg.out_dir.join("parameters.jsonl"), &report.parameters())?;
    dataset::write_jsonl(&cfg.out_dir.join("predictions.jsonl"), &predictions)?;
    dataset::write_json(&cfg.out_dir.join("train_summary.json"), &report.summary)?;
    Ok(report)
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n_lines: usize,
    pub n_errors: usize,
    pub mean_composite: f64,
    pub rows: Vec<ScoreRow>,
}

/// Scores every line of the outputs file. Lines that cannot be matched or
/// scored get composite 0 and an error message; the run continues.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreSummary, CommandError> {
    let gts = require_dataset(cfg)?;
    let outputs = cfg
        .outputs
        .as_ref()
        .ok_or(CommandError::Missing("outputs path is required"))?;
    let engine = RewardEngine::new(cfg.weights, build_judge(cfg)?);
    let by_id: std::collections::HashMap<&str, &GroundTruthSample> =
        gts.iter().map(|g| (g.sample_id.as_str(), g)).collect();

    let lines = dataset::read_lines::<OutputRecord>(outputs)?;
    let rows: Vec<ScoreRow> = lines
        .par_iter()
        .map(|l| {
            let failed = |sample_id: Option<String>, e: String| ScoreRow {
                line: l.number,
                sample_id,
                reward: RewardBreakdown::default(),
                error: Some(e),
            };
            let rec = match &l.record {
                Ok(r) => r,
                Err(e) => return failed(None, e.clone()),
            };
            let id = Some(rec.sample_id.clone());
            let Some(gt) = by_id.get(rec.sample_id.as_str()) else {
                return failed(id, "no ground truth for sample_id".into());
            };
            match engine.score(&parse_output(&rec.output_text), gt) {
                Ok(reward) => ScoreRow {
                    line: l.number,
                    sample_id: id,
                    reward,
                    error: None,
                },
                Err(e) => failed(id, e.to_string()),
            }
        })
        .collect();

    ensure_dir(&cfg.out_dir)?;
    dataset::write_jsonl(&cfg.out_dir.join("scores.jsonl"), &rows)?;
    let n_errors = rows.iter().filter(|r| r.error.is_some()).count();
    let mean_composite = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.reward.composite).sum::<f64>() / rows.len() as f64
    };
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("line {}: {}", r.line, r.error.as_deref().unwrap_or_default());
    }
    Ok(ScoreSummary {
        n_lines: rows.len(),
        n_errors,
        mean_composite,
        rows,
    })
}

/// Evaluates predictions against the dataset and writes `eval.json` and
/// `eval.txt`. Predictions default to `<out_dir>/predictions.jsonl`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CommandError> {
    let gts = require_dataset(cfg)?;
    let pred_path = cfg
        .predictions
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("predictions.jsonl"));
    let mut preds = Vec::new();
    let mut bad = Vec::new();
    for l in dataset::read_lines::<PredictionRecord>(&pred_path)? {
        match l.record {
            Ok(p) => preds.push(p),
            Err(e) => bad.push(SampleRow::error(format!("line {}", l.number), e)),
        }
    }
    let mut report = metrics::evaluate(&preds, &gts);
    if !bad.is_empty() {
        let mut rows = report.rows;
        rows.extend(bad);
        report = metrics::report_from_rows(rows);
    }
    ensure_dir(&cfg.out_dir)?;
    dataset::write_json(&cfg.out_dir.join("eval.json"), &report)?;
    let txt = cfg.out_dir.join("eval.txt");
    std::fs::write(&txt, report.text_table()).map_err(|source| CommandError::Io { path: txt, source })?;
    Ok(report)
}

/// Training variants compared by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutPostTraining,
    WithoutFormat,
    WithoutDetection,
    WithoutInteraction,
    WithoutCot,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WithoutPostTraining,
        Variant::WithoutFormat,
        Variant::WithoutDetection,
        Variant::WithoutInteraction,
        Variant::WithoutCot,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::WithoutPostTraining => "W/O PT",
            Variant::WithoutFormat => "W/O FR",
            Variant::WithoutDetection => "W/O DR",
            Variant::WithoutInteraction => "W/O IR",
            Variant::WithoutCot => "W/O CoTR",
        }
    }

    /// Training weights: the dropped term gets weight 0 and the rest are
    /// rescaled to sum to 1.
    pub fn weights(&self, base: &RewardWeights) -> RewardWeights {
        let mut w = *base;
        let c = &mut w.composite;
        match self {
            Variant::Full | Variant::WithoutPostTraining => return w,
            Variant::WithoutFormat => c.format = 0.0,
            Variant::WithoutDetection => c.detection = 0.0,
            Variant::WithoutInteraction => c.interaction = 0.0,
            Variant::WithoutCot => c.cot = 0.0,
        }
        let sum = c.sum();
        if sum > 0.0 {
            c.format /= sum;
            c.detection /= sum;
            c.interaction /= sum;
            c.cot /= sum;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    /// Metrics in expectation under the final policy, averaged over samples
    /// and replicates.
    pub metrics: MetricValues,
    /// Expected composite reward under the full weights.
    pub expected_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub n_samples: usize,
    pub replicates: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn text_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "H-mIOU", "O-mIOU", "A-ACC", "map", "reward"
        );
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                r.label, m.h_miou, m.o_miou, m.a_acc, m.map_rate, r.expected_reward
            ));
        }
        s
    }
}

fn mean_metrics(ms: &[(MetricValues, f64)]) -> (MetricValues, f64) {
    let n = ms.len().max(1) as f64;
    let mut acc = MetricValues::default();
    let mut reward = 0.0;
    for (m, r) in ms {
        acc.h_miou += m.h_miou / n;
        acc.o_miou += m.o_miou / n;
        acc.a_acc += m.a_acc / n;
        acc.map_rate += m.map_rate / n;
        reward += r / n;
    }
    (acc, reward)
}

/// Trains every variant on every sample and tabulates final metrics.
pub fn ablation_table(
    cfg: &RunConfig,
    samples: &[GroundTruthSample],
    judge: &SharedJudge,
) -> Result<AblationTable, CommandError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(ConfigError::Invalid(
            problems
                .into_iter()
                .map(|message| crate::config::ConfigProblem { line: None, message })
                .collect(),
        )
        .into());
    }
    let full = RewardEngine::new(cfg.weights, judge.clone());
    let jobs: Vec<(Variant, usize, usize)> = Variant::ALL
        .iter()
        .flat_map(|&v| {
            let reps = if v == Variant::WithoutPostTraining {
                1
            } else {
                cfg.ablation_replicates
            };
            (0..samples.len()).flat_map(move |i| (0..reps).map(move |r| (v, i, r)))
        })
        .collect();

    let results = jobs
        .par_iter()
        .map(|&(v, i, r)| {
            let sample = &samples[i];
            let (table, policy) = if v == Variant::WithoutPostTraining {
                let table = sample_table(cfg, sample, i)?;
                (table.clone(), TemplatePolicy::uniform(table))
            } else {
                let run = train_sample(cfg, v.weights(&cfg.weights), judge, sample, i, r)?;
                (run.table, run.policy)
            };
            let m = expected_metrics(&policy, &template_metrics(sample, &table));
            let rewards = template_rewards(sample, &table, &full)?;
            Ok((v, m, expected_reward(&policy, &rewards)))
        })
        .collect::<Result<Vec<_>, CommandError>>()?;

    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let ms: Vec<(MetricValues, f64)> = results
                .iter()
                .filter(|(rv, _, _)| *rv == v)
                .map(|(_, m, r)| (*m, *r))
                .collect();
            let (metrics, expected_reward) = mean_metrics(&ms);
            AblationRow {
                variant: v,
                label: v.label().to_string(),
                metrics,
                expected_reward,
            }
        })
        .collect();
    Ok(AblationTable {
        n_samples: samples.len(),
        replicates: cfg.ablation_replicates,
        rows,
    })
}

/// Writes `ablation.json` and `ablation.txt` under `out_dir`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationTable, CommandError> {
    let samples = load_or_generate(cfg)?;
    let judge = build_judge(cfg)?;
    let table = ablation_table(cfg, &samples, &judge)?;
    ensure_dir(&cfg.out_dir)?;
    dataset::write_json(&cfg.out_dir.join("ablation.json"), &table)?;
    let txt = cfg.out_dir.join("ablation.txt");
    std::fs::write(&txt, table.text_table()).map_err(|source| CommandError::Io { path: txt, source })?;
    Ok(table)
}

//! Group-relative policy optimization.
//!
//! For a query `q` and a group of `G` outputs drawn from `π_old`:
//!
//! ```text
//! J(θ) = 1/G Σ min(ρ_i A_i, clip(ρ_i, 1−ε, 1+ε) A_i)  −  β · 1/G Σ KL_i
//! ρ_i  = π_θ(o_i|q) / π_old(o_i|q)
//! A_i  = (r_i − mean(r)) / std(r)                (population std)
//! KL_i = u − ln u − 1,   u = π_ref(o_i|q) / π_θ(o_i|q)
//! ```
//!
//! Advantages are constants with respect to θ. Training is plain gradient
//! ascent with a fixed learning rate.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::judge::Judge;
use crate::reward::{RewardEngine, RewardError};
use crate::types::{GroundTruthSample, GroupSample, GrpoConfig, StructuredOutput, Validate};

/// A stochastic policy over structured outputs with a flat parameter vector.
///
/// `π_old` and `π_ref` are clones holding frozen parameters.
pub trait Policy: Clone + Send + Sync {
    fn parameters(&self) -> &[f64];

    fn set_parameters(&mut self, theta: &[f64]);

    /// `ln π_θ(output | query)`; `-inf` for outputs outside the support.
    fn log_prob(&self, query: &str, output: &StructuredOutput) -> f64;

    fn sample(&self, query: &str, rng: &mut dyn RngCore) -> StructuredOutput;

    /// `∂ ln π_θ(output | query) / ∂θ`.
    fn log_prob_gradient(&self, query: &str, output: &StructuredOutput) -> Vec<f64>;
}

/// `G` outputs for one query, drawn from `π_old`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub query: GroundTruthSample,
    pub samples: Vec<GroupSample>,
}

/// Standardizes rewards within a group. A standard deviation below `guard`
/// gives all-zero advantages.
pub fn group_advantages(rewards: &[f64], guard: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= guard) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `u − ln u − 1` with `u = exp(logp_ref − logp_cur)`. Non-negative, zero iff
/// the log-probabilities agree.
pub fn kl_penalty(logp_ref: f64, logp_cur: f64) -> f64 {
    let log_u = logp_ref - logp_cur;
    // expm1 keeps precision near zero: u − ln u − 1 = expm1(log_u) − log_u.
    (log_u.exp_m1() - log_u).max(0.0)
}

pub fn clipped_surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the min selects the unclipped `ρ·A` branch.
fn unclipped_branch(ratio: f64, advantage: f64, eps: f64) -> bool {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    ratio * advantage <= clipped * advantage
}

pub fn mean_kl(rollout: &GroupRollout) -> f64 {
    let g = rollout.samples.len() as f64;
    rollout
        .samples
        .iter()
        .map(|s| kl_penalty(s.logp_ref, s.logp_current))
        .sum::<f64>()
        / g
}

/// Group-mean clipped surrogate minus `beta_kl` times group-mean KL.
pub fn grpo_objective(rollout: &GroupRollout, beta_kl: f64, eps: f64) -> f64 {
    let g = rollout.samples.len() as f64;
    let surrogate = rollout
        .samples
        .iter()
        .map(|s| clipped_surrogate_term(s.ratio, s.advantage, eps))
        .sum::<f64>()
        / g;
    surrogate - beta_kl * mean_kl(rollout)
}

/// Recomputes `logp_current` and `ratio` under `policy`.
pub fn refresh_rollout<P: Policy>(rollout: &GroupRollout, policy: &P) -> GroupRollout {
    let query = rollout.query.query.as_str();
    let samples = rollout
        .samples
        .iter()
        .map(|s| {
            let logp_current = policy.log_prob(query, &s.output);
            GroupSample {
                logp_current,
                ratio: (logp_current - s.logp_old).exp(),
                ..s.clone()
            }
        })
        .collect();
    GroupRollout {
        query: rollout.query.clone(),
        samples,
    }
}

/// Analytic `∂J/∂θ` for a rollout whose `logp_current` and `ratio` are
/// current for `policy`.
///
/// Per sample the surrogate contributes `A ρ ∇ln π_θ` on the unclipped
/// branch and nothing on the clipped one; the KL term contributes
/// `−β (1 − u) ∇ln π_θ`.
pub fn objective_gradient<P: Policy>(rollout: &GroupRollout, policy: &P, beta_kl: f64, eps: f64) -> Vec<f64> {
    let dim = policy.parameters().len();
    let g = rollout.samples.len() as f64;
    let mut grad = vec![0.0; dim];
    for s in &rollout.samples {
        let surrogate = if unclipped_branch(s.ratio, s.advantage, eps) {
            s.advantage * s.ratio
        } else {
            0.0
        };
        let u = (s.logp_ref - s.logp_current).exp();
        let coef = (surrogate - beta_kl * (1.0 - u)) / g;
        if coef == 0.0 {
            continue;
        }
        let dlogp = policy.log_prob_gradient(&rollout.query.query, &s.output);
        for (acc, d) in grad.iter_mut().zip(dlogp) {
            *acc += coef * d;
        }
    }
    grad
}

/// One record of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_kl: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub parameters: Vec<f64>,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {quantity} at iteration {iteration} (query {sample_id}): {value}")]
    NonFinite {
        iteration: usize,
        sample_id: String,
        quantity: &'static str,
        value: f64,
    },
    #[error("reward failed at iteration {iteration}: {source}")]
    Reward {
        iteration: usize,
        #[source]
        source: RewardError,
    },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream per (iteration, query, sample).
pub fn sample_rng(seed: u64, iteration: usize, query: usize, sample: usize) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [iteration as u64, query as u64, sample as u64] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Draws `G` outputs from `old`, scores them and fills advantages. Sampling
/// and scoring run concurrently; each member has its own RNG stream.
pub fn collect_rollout<P: Policy, J: Judge>(
    old: &P,
    reference: &P,
    sample: &GroundTruthSample,
    engine: &RewardEngine<J>,
    config: &GrpoConfig,
    iteration: usize,
    query_index: usize,
) -> Result<GroupRollout, RewardError> {
    let q = sample.query.as_str();
    let scored: Vec<(StructuredOutput, f64, f64, _)> = (0..config.group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(config.rng_seed, iteration, query_index, i);
            let output = old.sample(q, &mut rng);
            let logp_old = old.log_prob(q, &output);
            let logp_ref = reference.log_prob(q, &output);
            let reward = engine.score(&output, sample);
            (output, logp_old, logp_ref, reward)
        })
        .collect();
    let mut samples = Vec::with_capacity(scored.len());
    for (output, logp_old, logp_ref, reward) in scored {
        samples.push(GroupSample {
            output,
            logp_current: logp_old,
            logp_old,
            logp_ref,
            ratio: 1.0,
            reward: reward?,
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward.composite).collect();
    for (s, a) in samples.iter_mut().zip(group_advantages(&rewards, config.std_guard)) {
        s.advantage = a;
    }
    Ok(GroupRollout {
        query: sample.clone(),
        samples,
    })
}

/// Runs GRPO. `π_ref` is the initial policy; `π_old` is refreshed at the
/// start of every iteration and every query of `dataset` is rolled out once
/// per iteration.
pub fn train<P: Policy, J: Judge>(
    policy: &mut P,
    dataset: &[GroundTruthSample],
    engine: &RewardEngine<J>,
    config: &GrpoConfig,
) -> Result<TrainOutcome, TrainError> {
    let check = GrpoConfig {
        iterations: config.iterations.max(1),
        ..*config
    };
    let problems = check.validate();
    if !problems.is_empty() {
        return Err(TrainError::InvalidConfig(problems));
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let reference = policy.clone();
    let mut history = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let start = Instant::now();
        let old = policy.clone();
        let rollouts = dataset
            .iter()
            .enumerate()
            .map(|(qi, sample)| collect_rollout(&old, &reference, sample, engine, config, iter, qi))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| TrainError::Reward {
                iteration: iter,
                source,
            })?;

        let n = rollouts.len() as f64;
        let mean_reward = rollouts
            .iter()
            .flat_map(|r| r.samples.iter().map(|s| s.reward.composite))
            .sum::<f64>()
            / (n * config.group_size as f64);
        let mut objective = 0.0;
        let mut kl = 0.0;

        for step in 0..config.inner_steps {
            let mut grad = vec![0.0; policy.parameters().len()];
            for r in &rollouts {
                let current = if step == 0 {
                    r.clone()
                } else {
                    refresh_rollout(r, policy)
                };
                let obj = grpo_objective(&current, config.beta_kl, config.clip_epsilon);
                if !obj.is_finite() {
                    return Err(TrainError::NonFinite {
                        iteration: iter,
                        sample_id: r.query.sample_id.clone(),
                        quantity: "objective",
                        value: obj,
                    });
                }
                if step == 0 {
                    objective += obj / n;
                    kl += mean_kl(&current) / n;
                }
                let g = objective_gradient(&current, policy, config.beta_kl, config.clip_epsilon);
                for (acc, d) in grad.iter_mut().zip(g) {
                    if !d.is_finite() {
                        return Err(TrainError::NonFinite {
                            iteration: iter,
                            sample_id: r.query.sample_id.clone(),
                            quantity: "gradient",
                            value: d,
                        });
                    }
                    *acc += d / n;
                }
            }
            let theta: Vec<f64> = policy
                .parameters()
                .iter()
                .zip(&grad)
                .map(|(t, g)| t + config.learning_rate * g)
                .collect();
            policy.set_parameters(&theta);
        }

        history.push(IterationRecord {
            iter,
            mean_reward,
            objective,
            mean_kl: kl,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("iter {iter}: mean reward {mean_reward:.4}, objective {objective:.4}");
    }

    Ok(TrainOutcome {
        parameters: policy.parameters().to_vec(),
        history,
    })
}

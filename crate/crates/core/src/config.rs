//! Run configuration from `key = value` files.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma separated.
//! Missing keys take their defaults. Relative paths resolve against the
//! directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::judge::EndpointConfig;
use crate::toy_env::SceneSpec;
use crate::types::{GrpoConfig, RewardWeights, Validate};

/// Environment variable overriding `judge_endpoint`.
pub const ENV_JUDGE_ENDPOINT: &str = "HOI_GRPO_JUDGE_ENDPOINT";
/// Environment variable overriding `judge_timeout_ms`.
pub const ENV_JUDGE_TIMEOUT_MS: &str = "HOI_GRPO_JUDGE_TIMEOUT_MS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JudgeKind {
    #[default]
    Reference,
    External,
}

impl std::str::FromStr for JudgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(Self::Reference),
            "external" => Ok(Self::External),
            other => Err(format!("judge must be 'reference' or 'external' (got '{other}')")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: RewardWeights,
    pub grpo: GrpoConfig,
    pub scene: SceneSpec,
    /// Scenes produced by `gen-synthetic` and used when no dataset is given.
    pub n_scenes: usize,
    /// Training runs averaged per ablation variant.
    pub ablation_replicates: usize,
    pub judge: JudgeKind,
    pub judge_endpoint: Option<String>,
    pub judge_timeout_ms: u64,
    pub judge_max_inflight: usize,
    pub dataset: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let endpoint = EndpointConfig::new("");
        Self {
            weights: RewardWeights::default(),
            grpo: GrpoConfig::default(),
            scene: SceneSpec::default(),
            n_scenes: 4,
            ablation_replicates: 1,
            judge: JudgeKind::Reference,
            judge_endpoint: None,
            judge_timeout_ms: endpoint.timeout_ms,
            judge_max_inflight: endpoint.max_inflight,
            dataset: None,
            outputs: None,
            predictions: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// A problem found while loading a config, with its line when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigProblem {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration:\n  {}", join_problems(.0))]
    Invalid(Vec<ConfigProblem>),
}

fn join_problems(p: &[ConfigProblem]) -> String {
    p.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("\n  ")
}

impl ConfigError {
    pub fn problems(&self) -> &[ConfigProblem] {
        match self {
            ConfigError::Invalid(p) => p,
            ConfigError::Io { .. } => &[],
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text, collecting every problem before failing.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        let mut seen = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(ConfigProblem {
                    line: Some(line_no),
                    message: format!("expected 'key = value', got '{line}'"),
                });
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                problems.push(ConfigProblem {
                    line: Some(line_no),
                    message: format!("duplicate key '{key}' (first set on line {prev})"),
                });
                continue;
            }
            if let Err(message) = cfg.set(key, value, base) {
                problems.push(ConfigProblem {
                    line: Some(line_no),
                    message,
                });
            }
        }
        problems.extend(cfg.validate().into_iter().map(|message| ConfigProblem {
            line: None,
            message,
        }));
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        match self.assign(key, value, base) {
            Ok(true) => Ok(()),
            Ok(false) => Err(format!("unknown key '{key}'")),
            Err(e) => Err(format!("{key}: {e}")),
        }
    }

    /// Returns `Ok(false)` for an unknown key.
    fn assign(&mut self, key: &str, value: &str, base: &Path) -> Result<bool, String> {
        let path = |v: &str| base.join(v);
        let w = &mut self.weights;
        let g = &mut self.grpo;
        let s = &mut self.scene;
        match key {
            "beta_det" => w.beta_det = parse_num(value)?,
            "gamma" => w.gamma = parse_num(value)?,
            "lambda_cot" => w.lambda_cot = parse_num(value)?,
            "delta" => w.delta = parse_num(value)?,
            "iou_threshold" => w.iou_threshold = parse_num(value)?,
            "w_format" => w.composite.format = parse_num(value)?,
            "w_detection" => w.composite.detection = parse_num(value)?,
            "w_interaction" => w.composite.interaction = parse_num(value)?,
            "w_cot" => w.composite.cot = parse_num(value)?,
            "grm_group_size" => w.grm_group_size = parse_num(value)?,
            "group_size" => g.group_size = parse_num(value)?,
            "clip_epsilon" => g.clip_epsilon = parse_num(value)?,
            "beta_kl" => g.beta_kl = parse_num(value)?,
            "learning_rate" => g.learning_rate = parse_num(value)?,
            "iterations" => g.iterations = parse_num(value)?,
            "inner_steps" => g.inner_steps = parse_num(value)?,
            "std_guard" => g.std_guard = parse_num(value)?,
            "seed" => self.set_seed(parse_num(value)?),
            "grid_resolution" => s.grid_resolution = parse_num(value)?,
            "n_objects" => s.n_objects = parse_num(value)?,
            "verbs" => s.verb_vocabulary = parse_list(value),
            "objects" => s.object_vocabulary = parse_list(value),
            "candidate_boxes" => s.candidate_boxes = parse_num(value)?,
            "template_cap" => {
                s.template_cap = match value {
                    "none" | "" => None,
                    v => Some(parse_num(v)?),
                }
            }
            "n_scenes" => self.n_scenes = parse_num(value)?,
            "ablation_replicates" => self.ablation_replicates = parse_num(value)?,
            "judge" => self.judge = value.parse()?,
            "judge_endpoint" => self.judge_endpoint = Some(value.to_string()),
            "judge_timeout_ms" => self.judge_timeout_ms = parse_num(value)?,
            "judge_max_inflight" => self.judge_max_inflight = parse_num(value)?,
            "dataset" => self.dataset = Some(path(value)),
            "outputs" => self.outputs = Some(path(value)),
            "predictions" => self.predictions = Some(path(value)),
            "out_dir" => self.out_dir = path(value),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// One seed drives scene generation and optimization.
    pub fn set_seed(&mut self, seed: u64) {
        self.grpo.rng_seed = seed;
        self.scene.rng_seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.grpo.rng_seed
    }

    /// Applies overrides from an environment lookup.
    pub fn apply_env<F>(&mut self, lookup: F) -> Result<(), ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut problems = Vec::new();
        if let Some(v) = lookup(ENV_JUDGE_ENDPOINT) {
            self.judge_endpoint = Some(v);
        }
        if let Some(v) = lookup(ENV_JUDGE_TIMEOUT_MS) {
            match v.parse() {
                Ok(ms) => self.judge_timeout_ms = ms,
                Err(_) => problems.push(ConfigProblem {
                    line: None,
                    message: format!("{ENV_JUDGE_TIMEOUT_MS}: cannot parse '{v}'"),
                }),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn endpoint(&self) -> Option<EndpointConfig> {
        self.judge_endpoint.as_ref().map(|url| EndpointConfig {
            url: url.clone(),
            timeout_ms: self.judge_timeout_ms,
            max_inflight: self.judge_max_inflight,
        })
    }
}

impl Validate for RunConfig {
    fn validate(&self) -> Vec<String> {
        let mut out = self.weights.validate();
        out.extend(self.grpo.validate());
        out.extend(self.scene.validate());
        if self.n_scenes < 1 {
            out.push("n_scenes must be >= 1".to_string());
        }
        if self.ablation_replicates < 1 {
            out.push("ablation_replicates must be >= 1".to_string());
        }
        if self.judge == JudgeKind::External && self.judge_endpoint.is_none() {
            out.push("judge = external requires judge_endpoint".to_string());
        }
        if self.judge_timeout_ms == 0 {
            out.push("judge_timeout_ms must be > 0".to_string());
        }
        if self.judge_max_inflight == 0 {
            out.push("judge_max_inflight must be > 0".to_string());
        }
        out
    }
}

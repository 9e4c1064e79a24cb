use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hoi_grpo::commands;
use hoi_grpo::config::{JudgeKind, RunConfig};

#[derive(Parser)]
#[command(name = "hoi-grpo", version, about = "Multi-reward GRPO for human-object interaction outputs")]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    judge: Option<JudgeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Reference,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic toy corpus.
    GenSynthetic,
    /// Optimize a template policy per sample.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score model outputs against ground truth.
    Score {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Compute evaluation metrics for predictions.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare reward ablations.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(j) = cli.judge {
        cfg.judge = match j {
            JudgeArg::Reference => JudgeKind::Reference,
            JudgeArg::External => JudgeKind::External,
        };
    }
    let (dataset, outputs, predictions) = match &cli.command {
        Command::GenSynthetic => (None, None, None),
        Command::Train { dataset } | Command::Ablate { dataset } => (dataset.clone(), None, None),
        Command::Score { dataset, outputs } => (dataset.clone(), outputs.clone(), None),
        Command::Eval { dataset, predictions } => (dataset.clone(), None, predictions.clone()),
    };
    cfg.dataset = dataset.or(cfg.dataset);
    cfg.outputs = outputs.or(cfg.outputs);
    cfg.predictions = predictions.or(cfg.predictions);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load(&cli)?;
    let problems = hoi_grpo::Validate::validate(&cfg);
    if !problems.is_empty() {
        anyhow::bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    match cli.command {
        Command::GenSynthetic => {
            let path = commands::cmd_gen(&cfg)?;
            println!("{}", path.display());
        }
        Command::Train { .. } => {
            let report = commands::cmd_train(&cfg).context("train")?;
            for s in &report.summary {
                println!(
                    "{}  expected {:.4}  optimum {:.4}  ({} templates)",
                    s.sample_id, s.expected_reward, s.optimal_reward, s.n_templates
                );
            }
        }
        Command::Score { .. } => {
            let s = commands::cmd_score(&cfg).context("score")?;
            println!(
                "scored {} lines ({} errors), mean composite {:.4}",
                s.n_lines, s.n_errors, s.mean_composite
            );
        }
        Command::Eval { .. } => {
            let report = commands::cmd_eval(&cfg).context("eval")?;
            print!("{}", report.text_table());
        }
        Command::Ablate { .. } => {
            let table = commands::cmd_ablate(&cfg).context("ablate")?;
            print!("{}", table.text_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

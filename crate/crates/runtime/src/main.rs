use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rhpo_runtime::ablation::{run_ablation, AblationKind};
use rhpo_runtime::analysis::{analyze_similarity, collect_usage, emit_similarity};
use rhpo_runtime::checkpoint::load_policy;
use rhpo_runtime::config::{ExecutionMode, ExperimentConfig};
use rhpo_runtime::curves::emit_curves;
use rhpo_runtime::metrics::read_metrics;
use rhpo_runtime::train::run_learner;

#[derive(Parser)]
#[command(name = "rhpo", version, about = "Train and analyze hierarchical mixture policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Serial actor/learner interleaving (bitwise reproducible).
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run a one-factor grid over a base config.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Component usage and Bhattacharyya distance matrices for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/analysis")]
        out: PathBuf,
    },
    /// Learning curves from every metrics.jsonl under a directory.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_runs(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.jsonl") {
            found.push(dir.to_path_buf());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, deterministic, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if deterministic {
                cfg.run.mode = ExecutionMode::Deterministic;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = run_learner(&cfg, &out)?;
            println!(
                "{} learner steps, {} actor episodes, {} target copies; outputs in {}",
                summary.learner_steps,
                summary.actor_episodes,
                summary.target_copies,
                out.display()
            );
        }
        Command::Ablate { kind, config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let runs = run_ablation(kind, &cfg, seeds, &out)?;
            let names = cfg.env.build().task_names();
            let mut labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
            labels.dedup();
            for label in labels {
                let group: Vec<_> = runs.iter().filter(|r| r.label == label).map(|r| r.summary.records.clone()).collect();
                emit_curves(&out.join(label).join("curves"), &group, &names, 50)?;
                println!("{label}: {} runs", group.len());
            }
        }
        Command::Analyze { checkpoint, episodes, seed, out } => {
            let (policy, meta) = load_policy(&checkpoint)?;
            let usage = collect_usage(&policy, &meta.config.env, episodes, seed, true)?;
            let report = analyze_similarity(&usage)?;
            let names = meta.config.env.build().task_names();
            emit_similarity(&out, &report, &names)?;
            println!("similarity matrices in {}", out.display());
        }
        Command::Plot { metrics, out, bins } => {
            let mut dirs = Vec::new();
            find_runs(&metrics, &mut dirs)?;
            if dirs.is_empty() {
                bail!("no metrics.jsonl under {}", metrics.display());
            }
            let cfg = ExperimentConfig::load(&dirs[0].join("config.toml"))
                .with_context(|| format!("reading config of {}", dirs[0].display()))?;
            let runs = dirs.iter().map(|d| read_metrics(&d.join("metrics.jsonl"))).collect::<std::io::Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| metrics.join("curves"));
            let rows = emit_curves(&out, &runs, &cfg.env.build().task_names(), bins)?;
            println!("{} runs, {rows} records; curves in {}", runs.len(), out.display());
        }
    }
    Ok(())
}

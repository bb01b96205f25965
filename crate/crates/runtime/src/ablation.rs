//! One-factor ablation grids over a base config.

use std::io::Write;
use std::path::Path;

use rhpo_core::policy::InitScheme;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TransferMode};
use crate::metrics::MetricsRecord;
use crate::train::{run_learner, RunSummary};
use crate::RuntimeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    KlSweep,
    ActorCount,
    ComponentCount,
    InitScheme,
    Transfer,
}

pub const KL_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 1.0];
pub const COMPONENT_GRID: [usize; 4] = [2, 4, 8, 16];
pub const ACTOR_GRID: [usize; 3] = [1, 5, 20];

/// Labelled variants of `base` for `kind`.
pub fn grid(kind: AblationKind, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    match kind {
        AblationKind::KlSweep => {
            KL_GRID.iter().map(|&e| with(format!("eps_cat={e:e}"), &|c| c.eps_cat = e)).collect()
        }
        AblationKind::ActorCount => {
            ACTOR_GRID.iter().map(|&n| with(format!("actors={n}"), &|c| c.num_actors = n)).collect()
        }
        AblationKind::ComponentCount => {
            COMPONENT_GRID.iter().map(|&m| with(format!("components={m}"), &|c| c.components = Some(m))).collect()
        }
        AblationKind::InitScheme => [("homogeneous", InitScheme::Homogeneous), ("distinct_means", InitScheme::DistinctMeans)]
            .into_iter()
            .map(|(l, s)| with(l.to_string(), &|c| c.init = s))
            .collect(),
        AblationKind::Transfer => [
            ("scratch", TransferMode::None),
            ("sequential_only_hl", TransferMode::SequentialOnlyHl),
            ("sequential", TransferMode::Sequential),
        ]
        .into_iter()
        .map(|(l, m)| with(l.to_string(), &|c| c.transfer = m))
        .collect(),
    }
}

pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct MergedLine<'a> {
    label: &'a str,
    seed: u64,
    record: &'a MetricsRecord,
}

/// Runs every variant for each seed `base.seed .. base.seed + seeds`, each
/// into `out_dir/<label>/seed_<s>`, and merges all metrics into
/// `out_dir/merged.jsonl`.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, seeds: u64, out_dir: &Path) -> Result<Vec<AblationRun>, RuntimeError> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for (label, cfg) in grid(kind, base) {
        for s in 0..seeds.max(1) {
            let seed = base.seed + s;
            let cfg = ExperimentConfig { seed, ..cfg.clone() };
            let summary = run_learner(&cfg, &out_dir.join(&label).join(format!("seed_{seed}")))?;
            runs.push(AblationRun { label: label.clone(), seed, summary });
        }
    }
    let mut merged = std::io::BufWriter::new(std::fs::File::create(out_dir.join("merged.jsonl"))?);
    for run in &runs {
        for record in &run.summary.records {
            serde_json::to_writer(&mut merged, &MergedLine { label: &run.label, seed: run.seed, record })?;
            merged.write_all(b"\n")?;
        }
    }
    merged.flush()?;
    Ok(runs)
}

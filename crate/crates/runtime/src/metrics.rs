//! Line-delimited JSON metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rhpo_core::improver::StepDiagnostics;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// One finished actor episode; returns are the hindsight sums of every
    /// task's reward under the scheduled behavior.
    Episode,
    /// Evaluation episodes that execute one task for the whole episode.
    Eval,
}

/// Averages of the learner diagnostics since the previous record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub steps: u64,
    pub critic_loss: f64,
    pub mean_q: f64,
    pub eta: f64,
    pub lambda_mean: f64,
    pub lambda_cov: f64,
    pub lambda_cat: f64,
    pub t_h: f64,
    pub t_mean: f64,
    pub t_cov: f64,
    pub categorical_entropy: f64,
}

impl DiagnosticsSummary {
    pub fn add(&mut self, d: &StepDiagnostics) {
        self.steps += 1;
        let k = 1.0 / self.steps as f64;
        let upd = |acc: &mut f64, v: f64| *acc += (v - *acc) * k;
        upd(&mut self.critic_loss, d.critic_loss);
        upd(&mut self.mean_q, d.mean_q);
        upd(&mut self.eta, d.eta);
        upd(&mut self.lambda_mean, d.lambda_mean);
        upd(&mut self.lambda_cov, d.lambda_cov);
        upd(&mut self.lambda_cat, d.lambda_cat);
        upd(&mut self.t_h, d.t_h);
        upd(&mut self.t_mean, d.t_mean);
        upd(&mut self.t_cov, d.t_cov);
        upd(&mut self.categorical_entropy, d.categorical_entropy);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    /// Seconds since the run started. Zero in deterministic mode so the
    /// stream is reproducible.
    pub wall_time: f64,
    pub learner_step: u64,
    pub actor_episodes: u64,
    /// One entry per task; `None` for tasks not evaluated.
    pub task_returns: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsSummary>,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

//! Learning curves against actor episodes.
//!
//! `records.csv` has one row per metrics record:
//!
//! ```text
//! run,kind,wall_time,learner_step,actor_episodes,<task 0>,...,<task n-1>
//! ```
//!
//! with empty cells for tasks a record does not cover. `bands.csv` has
//! `task,actor_episodes,mean,std,runs`: per-run returns are averaged within
//! episode bins, then combined across runs (sample standard deviation, 0
//! for a single run). Evaluation records are used when a run has any,
//! otherwise the hindsight episode returns.

use std::io::Write;
use std::path::Path;

use plotters::prelude::*;

use crate::metrics::{MetricsRecord, RecordKind};
use crate::RuntimeError;

#[derive(Clone, Debug, PartialEq)]
pub struct BandPoint {
    pub actor_episodes: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

fn kind_name(k: RecordKind) -> &'static str {
    match k {
        RecordKind::Episode => "episode",
        RecordKind::Eval => "eval",
    }
}

pub fn write_records_csv(path: &Path, runs: &[Vec<MetricsRecord>], task_names: &[String]) -> Result<usize, RuntimeError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "run,kind,wall_time,learner_step,actor_episodes")?;
    for t in task_names {
        write!(out, ",{t}")?;
    }
    writeln!(out)?;
    let mut rows = 0;
    for (run, records) in runs.iter().enumerate() {
        for r in records {
            write!(out, "{run},{},{},{},{}", kind_name(r.kind), r.wall_time, r.learner_step, r.actor_episodes)?;
            for k in 0..task_names.len() {
                match r.task_returns.get(k).copied().flatten() {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

fn series(records: &[MetricsRecord], task: usize) -> Vec<(f64, f64)> {
    let has_eval = records.iter().any(|r| r.kind == RecordKind::Eval);
    let kind = if has_eval { RecordKind::Eval } else { RecordKind::Episode };
    records
        .iter()
        .filter(|r| r.kind == kind)
        .filter_map(|r| r.task_returns.get(task).copied().flatten().map(|v| (r.actor_episodes as f64, v)))
        .collect()
}

/// Mean and spread of `task`'s return across runs in `bins` equal-width
/// episode bins; bins no run reaches are omitted.
pub fn band(runs: &[Vec<MetricsRecord>], task: usize, bins: usize) -> Vec<BandPoint> {
    let all: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| series(r, task)).collect();
    let max_x = all.iter().flatten().map(|p| p.0).fold(0.0f64, f64::max);
    if all.iter().all(|s| s.is_empty()) || bins == 0 {
        return Vec::new();
    }
    let width = (max_x / bins as f64).max(1.0);
    let mut out = Vec::new();
    for b in 0..bins {
        let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
        let per_run: Vec<f64> = all
            .iter()
            .filter_map(|s| {
                let v: Vec<f64> = s.iter().filter(|p| (p.0 > lo && p.0 <= hi) || (b == 0 && p.0 == 0.0)).map(|p| p.1).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        if per_run.is_empty() {
            continue;
        }
        let n = per_run.len();
        let mean = per_run.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        out.push(BandPoint { actor_episodes: hi.min(max_x), mean, std, runs: n });
    }
    out
}

fn write_band_svg(path: &Path, title: &str, points: &[BandPoint]) -> Result<(), RuntimeError> {
    let plot = |e: &dyn std::fmt::Display| RuntimeError::Plot(e.to_string());
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot(&e))?;
    let x_max = points.iter().map(|p| p.actor_episodes).fold(1.0f64, f64::max);
    let y_min = points.iter().map(|p| p.mean - p.std).fold(0.0f64, f64::min);
    let y_max = points.iter().map(|p| p.mean + p.std).fold(1e-9f64, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, y_min..y_max * 1.05)
        .map_err(|e| plot(&e))?;
    chart.configure_mesh().x_desc("actor episodes").y_desc("return").draw().map_err(|e| plot(&e))?;
    if !points.is_empty() {
        let mut poly: Vec<(f64, f64)> = points.iter().map(|p| (p.actor_episodes, p.mean + p.std)).collect();
        poly.extend(points.iter().rev().map(|p| (p.actor_episodes, p.mean - p.std)));
        chart.draw_series(std::iter::once(Polygon::new(poly, BLUE.mix(0.2).filled()))).map_err(|e| plot(&e))?;
        chart
            .draw_series(LineSeries::new(points.iter().map(|p| (p.actor_episodes, p.mean)), &BLUE))
            .map_err(|e| plot(&e))?;
    }
    root.present().map_err(|e| plot(&e))?;
    Ok(())
}

/// Writes `records.csv`, `bands.csv` and one `curve_<task>.svg` per task.
/// Returns the number of record rows.
pub fn emit_curves(dir: &Path, runs: &[Vec<MetricsRecord>], task_names: &[String], bins: usize) -> Result<usize, RuntimeError> {
    std::fs::create_dir_all(dir)?;
    let rows = write_records_csv(&dir.join("records.csv"), runs, task_names)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("bands.csv"))?);
    writeln!(out, "task,actor_episodes,mean,std,runs")?;
    for (k, name) in task_names.iter().enumerate() {
        let points = band(runs, k, bins);
        for p in &points {
            writeln!(out, "{name},{},{},{},{}", p.actor_episodes, p.mean, p.std, p.runs)?;
        }
        if !runs.is_empty() {
            write_band_svg(&dir.join(format!("curve_{name}.svg")), name, &points)?;
        }
    }
    out.flush()?;
    Ok(rows)
}

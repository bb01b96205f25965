//! Component specialization: which components each task activates, which
//! tasks activate each component, and pairwise Bhattacharyya distances.

use std::io::Write;
use std::path::Path;

use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhpo_core::distributions::{bhattacharyya_probs, DiagGaussian};
use rhpo_core::envs::EnvSpec;
use rhpo_core::policy::Policy;
use serde::{Deserialize, Serialize};

use crate::actor::evaluate;
use crate::RuntimeError;

/// Steps on which each component was active, per task (`counts[task][component]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentUsage {
    pub counts: Vec<Vec<u64>>,
}

/// Rolls out each task for `episodes` episodes and counts components.
pub fn collect_usage(
    policy: &Policy,
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
    stochastic: bool,
) -> Result<ComponentUsage, RuntimeError> {
    let mut env = env.build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Vec::with_capacity(policy.num_tasks());
    for task in 0..policy.num_tasks() {
        counts.push(evaluate(policy, env.as_mut(), task, episodes, stochastic, &mut rng)?.component_counts);
    }
    Ok(ComponentUsage { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Row `i`: distribution over components used by task `i`.
    pub task_to_component: Vec<Vec<f64>>,
    /// Row `j`: distribution over tasks that activated component `j`.
    pub component_to_task: Vec<Vec<f64>>,
    pub task_distance: Vec<Vec<f64>>,
    pub component_distance: Vec<Vec<f64>>,
}

fn normalize(row: &[u64]) -> Vec<f64> {
    let total: u64 = row.iter().sum();
    if total == 0 {
        // Never observed: the Bhattacharyya floor then yields the maximum
        // distance to everything.
        return vec![0.0; row.len()];
    }
    row.iter().map(|&c| c as f64 / total as f64).collect()
}

fn distance_matrix(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, RuntimeError> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = bhattacharyya_probs(&rows[i], &rows[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

pub fn analyze_similarity(usage: &ComponentUsage) -> Result<SimilarityReport, RuntimeError> {
    let tasks = usage.counts.len();
    let comps = usage.counts.first().map_or(0, |r| r.len());
    let task_to_component: Vec<Vec<f64>> = usage.counts.iter().map(|r| normalize(r)).collect();
    let component_to_task: Vec<Vec<f64>> = (0..comps)
        .map(|j| normalize(&(0..tasks).map(|i| usage.counts[i][j]).collect::<Vec<_>>()))
        .collect();
    Ok(SimilarityReport {
        task_distance: distance_matrix(&task_to_component)?,
        component_distance: distance_matrix(&component_to_task)?,
        task_to_component,
        component_to_task,
    })
}

/// Closed-form Bhattacharyya distance between diagonal Gaussians.
pub fn gaussian_bhattacharyya(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut d = 0.0;
    for k in 0..p.mean.len() {
        let (vp, vq) = (p.cholesky_diag[k].powi(2), q.cholesky_diag[k].powi(2));
        let v = 0.5 * (vp + vq);
        let dm = p.mean[k] - q.mean[k];
        d += dm * dm / (8.0 * v) + 0.5 * (v / (vp * vq).sqrt()).ln();
    }
    d
}

/// Mean over `states` and component pairs of the Bhattacharyya
/// coefficient `exp(-D_B)` between the policy's Gaussian components: 1 when
/// all components coincide, towards 0 as they separate.
pub fn component_similarity(policy: &Policy, task: usize, states: &[Vec<f64>]) -> Result<f64, RuntimeError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for s in states {
        let mix = policy.distribution(s, task)?;
        let m = mix.components.len();
        for i in 0..m {
            for j in (i + 1)..m {
                total += (-gaussian_bhattacharyya(&mix.components[i], &mix.components[j])).exp();
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 1.0 } else { total / pairs as f64 })
}

/// Square matrix as CSV with a label column and header row.
pub fn write_matrix_csv(path: &Path, labels: &[String], m: &[Vec<f64>]) -> Result<(), RuntimeError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "label")?;
    for l in labels {
        write!(out, ",{l}")?;
    }
    writeln!(out)?;
    for (l, row) in labels.iter().zip(m) {
        write!(out, "{l}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_heatmap(path: &Path, title: &str, labels: &[String], m: &[Vec<f64>]) -> Result<(), RuntimeError> {
    let n = m.len().max(1);
    let max = m.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);
    let root = SVGBackend::new(path, (120 + 60 * n as u32, 120 + 60 * n as u32)).into_drawing_area();
    let plot = |e: &dyn std::fmt::Display| RuntimeError::Plot(e.to_string());
    root.fill(&WHITE).map_err(|e| plot(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(|e| plot(&e))?;
    let label = |i: &usize| labels.get(*i).cloned().unwrap_or_default();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(n)
        .y_labels(n)
        .x_label_formatter(&label)
        .y_label_formatter(&label)
        .draw()
        .map_err(|e| plot(&e))?;
    chart
        .draw_series(m.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &v)| {
                let shade = (255.0 * (1.0 - v / max)).round() as u8;
                Rectangle::new([(j, i), (j + 1, i + 1)], RGBColor(255, shade, shade).filled())
            })
        }))
        .map_err(|e| plot(&e))?;
    root.present().map_err(|e| plot(&e))?;
    Ok(())
}

/// Writes both matrices as CSV and SVG heatmaps into `dir`.
pub fn emit_similarity(dir: &Path, report: &SimilarityReport, task_names: &[String]) -> Result<(), RuntimeError> {
    std::fs::create_dir_all(dir)?;
    let comp_names: Vec<String> = (0..report.component_distance.len()).map(|j| format!("c{j}")).collect();
    write_matrix_csv(&dir.join("task_distance.csv"), task_names, &report.task_distance)?;
    write_matrix_csv(&dir.join("component_distance.csv"), &comp_names, &report.component_distance)?;
    write_heatmap(&dir.join("task_distance.svg"), "task distance", task_names, &report.task_distance)?;
    write_heatmap(&dir.join("component_distance.svg"), "component distance", &comp_names, &report.component_distance)?;
    std::fs::write(dir.join("similarity.json"), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

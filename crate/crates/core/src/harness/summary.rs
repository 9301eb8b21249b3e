//! Across-seed aggregation of evaluation success.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_out::{csv_reader, write_csv};
use super::run::EpisodeRow;
use crate::error::{Error, Result};

/// One evaluation episode, as needed for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub variant: String,
    pub experiment: String,
    pub seed: u64,
    pub episode: u64,
    pub success: u8,
}

impl EvalPoint {
    pub fn from_rows(rows: &[EpisodeRow]) -> Vec<EvalPoint> {
        rows.iter()
            .filter(|r| r.role == "eval")
            .map(|r| EvalPoint {
                variant: r.variant.clone(),
                experiment: r.experiment.clone(),
                seed: r.seed,
                episode: r.episode,
                success: r.success,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub experiment: String,
    pub episode: u64,
    pub seeds: usize,
    /// Mean over seeds of the per-seed eval success rate.
    pub mean_success: f64,
    /// Population standard deviation over seeds.
    pub std_success: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type Key = (String, String);
/// Episode -> seed -> (successes, evaluations).
type Cells = BTreeMap<u64, BTreeMap<u64, (f64, f64)>>;

/// Per-seed success rate at each eval point, grouped by (variant, experiment).
fn per_seed(points: &[EvalPoint]) -> BTreeMap<Key, Cells> {
    let mut groups: BTreeMap<Key, Cells> = BTreeMap::new();
    for p in points {
        let cell = groups
            .entry((p.variant.clone(), p.experiment.clone()))
            .or_default()
            .entry(p.episode)
            .or_default()
            .entry(p.seed)
            .or_default();
        cell.0 += p.success as f64;
        cell.1 += 1.0;
    }
    groups
}

/// Mean eval success against training episode, with the spread across seeds.
pub fn export_summary(points: &[EvalPoint]) -> Result<Vec<SummaryRow>> {
    if points.is_empty() {
        return Err(Error::Usage("no evaluation episodes to summarize".into()));
    }
    let mut out = Vec::new();
    for ((variant, experiment), episodes) in per_seed(points) {
        for (episode, seeds) in episodes {
            let rates: Vec<f64> = seeds.values().map(|(s, n)| s / n).collect();
            let (mean_success, std_success) = mean_std(&rates);
            out.push(SummaryRow {
                variant: variant.clone(),
                experiment: experiment.clone(),
                episode,
                seeds: rates.len(),
                mean_success,
                std_success,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalRow {
    pub variant: String,
    pub experiment: String,
    pub seeds: usize,
    pub mean_success: f64,
    pub std_success: f64,
}

/// Eval success averaged over the last `window` training episodes of each
/// seed, then across seeds.
pub fn final_success(points: &[EvalPoint], window: u64) -> Result<Vec<FinalRow>> {
    if points.is_empty() {
        return Err(Error::Usage("no evaluation episodes to summarize".into()));
    }
    let mut out = Vec::new();
    for ((variant, experiment), episodes) in per_seed(points) {
        let mut by_seed: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
        for (episode, seeds) in &episodes {
            for (seed, (s, n)) in seeds {
                by_seed.entry(*seed).or_default().push((*episode, s / n));
            }
        }
        let rates: Vec<f64> = by_seed
            .values()
            .map(|pts| {
                let last = pts.iter().map(|p| p.0).max().unwrap_or(0);
                let tail: Vec<f64> = pts.iter().filter(|p| p.0 + window > last).map(|p| p.1).collect();
                tail.iter().sum::<f64>() / tail.len() as f64
            })
            .collect();
        let (mean_success, std_success) = mean_std(&rates);
        out.push(FinalRow {
            variant,
            experiment,
            seeds: rates.len(),
            mean_success,
            std_success,
        });
    }
    Ok(out)
}

/// Every `episodes.csv` below `dir`, in sorted order.
pub fn find_episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "episodes.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn read_eval_points(path: &Path) -> Result<Vec<EvalPoint>> {
    #[derive(Deserialize)]
    struct Row {
        variant: String,
        experiment: String,
        seed: u64,
        role: String,
        episode: u64,
        success: u8,
    }
    let mut out = Vec::new();
    for r in csv_reader(path)?.deserialize::<Row>() {
        let r = r?;
        if r.role == "eval" {
            out.push(EvalPoint {
                variant: r.variant,
                experiment: r.experiment,
                seed: r.seed,
                episode: r.episode,
                success: r.success,
            });
        }
    }
    Ok(out)
}

/// Summarize every run below `dir` into `summary.csv` and `final.csv`.
pub fn summarize_dir(dir: &Path, window: u64) -> Result<(Vec<SummaryRow>, Vec<FinalRow>)> {
    let mut points = Vec::new();
    for f in find_episode_files(dir)? {
        points.extend(read_eval_points(&f)?);
    }
    let summary = export_summary(&points)?;
    let finals = final_success(&points, window)?;
    write_csv(&dir.join("summary.csv"), "summary", &summary)?;
    write_csv(&dir.join("final.csv"), "final", &finals)?;
    Ok((summary, finals))
}

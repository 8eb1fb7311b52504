//! Aggregation of run directories into tables and plot-ready traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{FoamError, Result};
use crate::metrics::RunMetrics;
use crate::trainer::{read_log, IterationRecord};

/// Metric columns of the aggregate table.
pub const COLUMNS: [&str; 9] = [
    "cvf",
    "transient_length",
    "overshoot",
    "violation_auc",
    "crossings",
    "dp_gap",
    "mqs",
    "lip_viol_pct",
    "final_reward",
];

fn column(m: &RunMetrics, name: &str) -> f64 {
    match name {
        "cvf" => m.cvf,
        "transient_length" => m.transient_length,
        "overshoot" => m.overshoot,
        "violation_auc" => m.violation_auc,
        "crossings" => m.crossings as f64,
        "dp_gap" => m.dp_gap,
        "mqs" => m.mqs,
        "lip_viol_pct" => m.lip_viol_pct,
        "final_reward" => m.final_reward,
        _ => f64::NAN,
    }
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub metrics: RunMetrics,
    pub log: Vec<IterationRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| FoamError::Io(format!("{}: {e}", dir.join(name).display())))
    };
    let config: ExperimentConfig = serde_json::from_str(&read("config.json")?)?;
    let metrics: RunMetrics = serde_json::from_str(&read("metrics.json")?)?;
    let log = read_log(&dir.join("log.jsonl"))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        metrics,
        log,
    })
}

/// Every directory under `root` (inclusive) that holds a `metrics.json`,
/// in path order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("metrics.json").is_file() {
            out.push(d.clone());
        }
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

/// Sample standard deviation; zero for a single value.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[LoadedRun]) -> Vec<VariantSummary> {
    let mut groups: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.config.variant.to_string()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(variant, rs)| {
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            for c in COLUMNS {
                let xs: Vec<f64> = rs.iter().map(|r| column(&r.metrics, c)).collect();
                let (m, s) = mean_std(&xs);
                mean.insert(c.to_string(), m);
                std.insert(c.to_string(), s);
            }
            VariantSummary {
                variant,
                runs: rs.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn aggregate_csv(summaries: &[VariantSummary]) -> String {
    let mut s = String::from("variant,runs");
    for c in COLUMNS {
        let _ = write!(s, ",{c}_mean,{c}_std");
    }
    s.push('\n');
    for v in summaries {
        let _ = write!(s, "{},{}", v.variant, v.runs);
        for c in COLUMNS {
            let _ = write!(s, ",{},{}", v.mean[c], v.std[c]);
        }
        s.push('\n');
    }
    s
}

pub fn per_seed_csv(runs: &[LoadedRun]) -> String {
    let mut s = String::from("variant,seed");
    for c in COLUMNS {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for r in runs {
        let _ = write!(s, "{},{}", r.config.variant, r.config.seed);
        for c in COLUMNS {
            let _ = write!(s, ",{}", column(&r.metrics, c));
        }
        s.push('\n');
    }
    s
}

/// One row per (run, iteration, constraint).
pub fn trace_csv(runs: &[LoadedRun]) -> String {
    let mut s = String::from("variant,seed,iteration,constraint,eval_cost,estimate,threshold,margin\n");
    for r in runs {
        for rec in &r.log {
            for i in 0..rec.d.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.config.variant,
                    r.config.seed,
                    rec.iteration,
                    i,
                    rec.eval_costs.get(i).copied().unwrap_or(f64::NAN),
                    rec.j_c[i],
                    rec.d[i],
                    rec.xi[i]
                );
            }
        }
    }
    s
}

/// Writes `aggregate.csv`, `per_seed.csv`, `summary.json` and `traces.csv`
/// into `out`.
pub fn write_report(root: &Path, out: &Path) -> Result<Vec<VariantSummary>> {
    let dirs = find_runs(root)?;
    if dirs.is_empty() {
        return Err(FoamError::Empty("completed runs"));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let summaries = summarize(&runs);
    fs::create_dir_all(out)?;
    fs::write(out.join("aggregate.csv"), aggregate_csv(&summaries))?;
    fs::write(out.join("per_seed.csv"), per_seed_csv(&runs))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
    fs::write(out.join("traces.csv"), trace_csv(&runs))?;
    Ok(summaries)
}

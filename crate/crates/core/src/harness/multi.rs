use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::plan::{plan, Algorithm, Expander, PlanConfig, RouteTree, Stock, StopReason};

/// One column of a multi-step comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSetting {
    /// Unique key, also used in the results file.
    pub label: String,
    /// Single-step method, e.g. `bs` or `msbs`.
    pub decoder: String,
    pub plan: PlanConfig,
}

/// One planner run, stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub config: String,
    pub target: String,
    pub solved: bool,
    pub iterations: usize,
    pub model_calls: u64,
    pub wall_time_s: f64,
    pub nodes: usize,
    pub stop: StopReason,
    #[serde(default)]
    pub route: Option<RouteTree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub label: String,
    pub decoder: String,
    pub algorithm: Algorithm,
    pub beam_width: usize,
    pub time_limit: Option<f64>,
    pub targets: usize,
    pub solved: usize,
    pub solved_pct: f64,
    pub total_time_s: f64,
    pub model_calls: u64,
    pub avg_time_per_solved_s: Option<f64>,
    pub common_solved: usize,
    pub avg_time_common_s: Option<f64>,
    pub avg_iterations_common: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiStepReport {
    pub targets: usize,
    pub configs: Vec<ConfigReport>,
    pub records: Vec<TargetRecord>,
}

/// Intersection of two solved sets.
pub fn common_solved(a: &BTreeSet<String>, b: &BTreeSet<String>) -> BTreeSet<String> {
    a.intersection(b).cloned().collect()
}

fn load_records(path: &Path) -> Result<Vec<TargetRecord>, HarnessError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(HarnessError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // A run killed mid-write leaves a partial last line.
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {}
            Err(source) => {
                return Err(HarnessError::Results {
                    path: path.display().to_string(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok(out)
}

/// Plan every target under every setting. With `results`, each finished run
/// is appended as a JSON line at once, and runs already in the file are
/// reused instead of repeated.
///
/// Common-solved figures of setting `i > 0` use the targets solved by both
/// it and setting 0; setting 0 uses the targets solved by every setting.
pub fn bench_multi_step<E: Expander>(
    targets: &[String],
    stock: &Stock,
    settings: &[PlanSetting],
    mut expander_for: impl FnMut(&PlanSetting) -> E,
    results: Option<&Path>,
) -> Result<MultiStepReport, HarnessError> {
    let mut done: HashMap<(String, String), TargetRecord> = HashMap::new();
    if let Some(path) = results {
        if path.exists() {
            // Drop a partial trailing line before appending.
            let records = load_records(path)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(path, text).map_err(|source| HarnessError::Io {
                path: path.display().to_string(),
                source,
            })?;
            for r in records {
                done.insert((r.config.clone(), r.target.clone()), r);
            }
        }
    }
    let mut file = match results {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| HarnessError::Io {
                    path: path.display().to_string(),
                    source,
                })?,
        ),
        None => None,
    };

    let mut per_setting: Vec<Vec<TargetRecord>> = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut rows = Vec::with_capacity(targets.len());
        for target in targets {
            if let Some(r) = done.get(&(setting.label.clone(), target.clone())) {
                rows.push(r.clone());
                continue;
            }
            let result = plan(target, expander_for(setting), stock, &setting.plan)?;
            let record = TargetRecord {
                config: setting.label.clone(),
                target: target.clone(),
                solved: result.solved,
                iterations: result.iterations,
                model_calls: result.model_calls,
                wall_time_s: result.wall_time_s,
                nodes: result.nodes,
                stop: result.stop,
                route: result.route,
            };
            if let (Some(f), Some(path)) = (file.as_mut(), results) {
                let line = serde_json::to_string(&record)? + "\n";
                f.write_all(line.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|source| HarnessError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
            }
            rows.push(record);
        }
        per_setting.push(rows);
    }
    Ok(summarize(targets.len(), settings, per_setting))
}

fn summarize(n_targets: usize, settings: &[PlanSetting], per_setting: Vec<Vec<TargetRecord>>) -> MultiStepReport {
    let solved_sets: Vec<BTreeSet<String>> = per_setting
        .iter()
        .map(|rows| rows.iter().filter(|r| r.solved).map(|r| r.target.clone()).collect())
        .collect();
    let mut configs = Vec::with_capacity(settings.len());
    for (i, (setting, rows)) in settings.iter().zip(&per_setting).enumerate() {
        let common = if i == 0 {
            solved_sets
                .iter()
                .skip(1)
                .fold(solved_sets[0].clone(), |acc, s| common_solved(&acc, s))
        } else {
            common_solved(&solved_sets[i], &solved_sets[0])
        };
        let solved: Vec<&TargetRecord> = rows.iter().filter(|r| r.solved).collect();
        let in_common: Vec<&TargetRecord> = rows.iter().filter(|r| common.contains(&r.target)).collect();
        let avg = |xs: &[&TargetRecord], f: fn(&TargetRecord) -> f64| {
            (!xs.is_empty()).then(|| xs.iter().map(|r| f(r)).sum::<f64>() / xs.len() as f64)
        };
        configs.push(ConfigReport {
            label: setting.label.clone(),
            decoder: setting.decoder.clone(),
            algorithm: setting.plan.algorithm,
            beam_width: setting.plan.beam_width,
            time_limit: setting.plan.time_limit,
            targets: n_targets,
            solved: solved.len(),
            solved_pct: if n_targets == 0 {
                0.0
            } else {
                100.0 * solved.len() as f64 / n_targets as f64
            },
            total_time_s: rows.iter().map(|r| r.wall_time_s).sum(),
            model_calls: rows.iter().map(|r| r.model_calls).sum(),
            avg_time_per_solved_s: avg(&solved, |r| r.wall_time_s),
            common_solved: common.len(),
            avg_time_common_s: avg(&in_common, |r| r.wall_time_s),
            avg_iterations_common: avg(&in_common, |r| r.iterations as f64),
        });
    }
    MultiStepReport {
        targets: n_targets,
        configs,
        records: per_setting.into_iter().flatten().collect(),
    }
}

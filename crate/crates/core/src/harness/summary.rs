//! Cross-seed aggregation. Everything is recomputed from the per-run
//! accuracy-matrix CSVs, not from `run.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{RunRecord, RunStatus, EXPERIMENT_FILE, MATRIX_FILE, RUN_FILE};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";

/// Band half-width, in standard deviations, of the `A_t` curves.
pub const BAND_STDS: f64 = 3.0;

/// Mean and sample (n − 1) standard deviation; the std of one value is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::Aggregation("no values to aggregate".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Stat { mean, std, n })
    }

    /// `"88.2 ± 1.6"`: a fraction rendered in percentage points.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// One successful run as read back from disk.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub name: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub matrix: AccuracyMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub name: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Per task `i`: `a_{T,i}` over seeds.
    pub final_accuracy: Vec<Stat>,
    /// `final_accuracy` formatted as in the result tables.
    pub table_row: Vec<String>,
    /// Per `t = 1..=T`: `A_t` over seeds.
    pub average_accuracy: Vec<Stat>,
    /// `(mean − 3 std, mean + 3 std)` of each `A_t`.
    pub average_accuracy_band: Vec<(f64, f64)>,
    pub forgetting: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub tasks: usize,
    pub methods: Vec<MethodSummary>,
    pub failed_runs: Vec<FailedRun>,
}

/// Successful and failed runs under an experiment directory
/// (`<exp>/<name>/<seed>/`), sorted by name then seed.
pub fn load_artifacts(exp_dir: &Path) -> Result<(Vec<RunArtifact>, Vec<FailedRun>)> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut names: Vec<PathBuf> = read_dirs(exp_dir)?;
    names.sort();
    for name_dir in names {
        let name = file_name(&name_dir);
        let mut seeds: Vec<(u64, PathBuf)> = read_dirs(&name_dir)?
            .into_iter()
            .filter_map(|d| file_name(&d).parse::<u64>().ok().map(|s| (s, d)))
            .collect();
        seeds.sort();
        for (seed, dir) in seeds {
            let record = fs::read_to_string(dir.join(RUN_FILE))
                .ok()
                .and_then(|s| serde_json::from_str::<RunRecord>(&s).ok());
            if let Some(r) = record.as_ref().filter(|r| r.status == RunStatus::Failed) {
                failed.push(FailedRun {
                    name: name.clone(),
                    seed,
                    error: r.error.clone().unwrap_or_default(),
                });
                continue;
            }
            let path = dir.join(MATRIX_FILE);
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let matrix = AccuracyMatrix::from_csv(&text)
                .map_err(|e| Error::Aggregation(format!("{}: {e}", path.display())))?;
            ok.push(RunArtifact {
                name: name.clone(),
                seed,
                dir,
                matrix,
            });
        }
    }
    Ok((ok, failed))
}

fn read_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Aggregate runs per method name. Every matrix must be complete and share
/// one `T`.
pub fn summarize(experiment: &str, artifacts: &[RunArtifact], failed: Vec<FailedRun>) -> Result<Summary> {
    let first = artifacts
        .first()
        .ok_or_else(|| Error::Aggregation("no completed runs to summarize".into()))?;
    let tasks = first.matrix.num_tasks();
    for a in artifacts {
        if a.matrix.num_tasks() != tasks {
            return Err(Error::Aggregation(format!(
                "{} seed {} has T = {}, expected {tasks}",
                a.name,
                a.seed,
                a.matrix.num_tasks()
            )));
        }
        if !a.matrix.is_complete() {
            return Err(Error::Aggregation(format!("{} seed {} has an incomplete matrix", a.name, a.seed)));
        }
    }
    let mut groups: BTreeMap<&str, Vec<&RunArtifact>> = BTreeMap::new();
    let mut order = Vec::new();
    for a in artifacts {
        if !groups.contains_key(a.name.as_str()) {
            order.push(a.name.as_str());
        }
        groups.entry(&a.name).or_default().push(a);
    }
    let mut methods = Vec::new();
    for name in order {
        let runs = &groups[name];
        let final_accuracy = (0..tasks)
            .map(|i| Stat::of(&runs.iter().map(|r| r.matrix.get(tasks - 1, i).unwrap()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let average = (1..=tasks)
            .map(|t| {
                let values = runs
                    .iter()
                    .map(|r| average_accuracy(&r.matrix, t))
                    .collect::<Result<Vec<_>>>()?;
                Stat::of(&values)
            })
            .collect::<Result<Vec<_>>>()?;
        let forgetting = if tasks >= 2 {
            let values = runs.iter().map(|r| forgetting(&r.matrix)).collect::<Result<Vec<_>>>()?;
            Some(Stat::of(&values)?)
        } else {
            None
        };
        methods.push(MethodSummary {
            name: name.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            table_row: final_accuracy.iter().map(Stat::percent).collect(),
            final_accuracy,
            average_accuracy_band: average
                .iter()
                .map(|s| (s.mean - BAND_STDS * s.std, s.mean + BAND_STDS * s.std))
                .collect(),
            average_accuracy: average,
            forgetting,
        });
    }
    Ok(Summary {
        experiment: experiment.to_string(),
        tasks,
        methods,
        failed_runs: failed,
    })
}

/// True when `dir` directly holds `<name>/<seed>/` run directories.
pub fn is_experiment_dir(dir: &Path) -> bool {
    read_dirs(dir).unwrap_or_default().iter().any(|name_dir| {
        read_dirs(name_dir).unwrap_or_default().iter().any(|seed_dir| {
            file_name(seed_dir).parse::<u64>().is_ok()
                && (seed_dir.join(MATRIX_FILE).exists() || seed_dir.join(RUN_FILE).exists())
        })
    })
}

/// Summarize one experiment directory and write its `summary.json`.
/// Methods follow the order of `experiment.txt` when it parses.
pub fn summarize_dir(exp_dir: &Path) -> Result<Summary> {
    let (mut artifacts, failed) = load_artifacts(exp_dir)?;
    let declared: Vec<String> = fs::read_to_string(exp_dir.join(EXPERIMENT_FILE))
        .ok()
        .and_then(|s| ExperimentConfig::parse(&s).ok())
        .map(|c| c.methods.into_iter().map(|m| m.name).collect())
        .unwrap_or_default();
    let rank = |name: &str| declared.iter().position(|n| n == name).unwrap_or(usize::MAX);
    artifacts.sort_by(|a, b| (rank(&a.name), &a.name, a.seed).cmp(&(rank(&b.name), &b.name, b.seed)));
    let summary = summarize(&file_name(exp_dir), &artifacts, failed)?;
    let path = exp_dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Summarize `out_dir` itself if it is an experiment directory, otherwise
/// every experiment directory directly under it.
pub fn summarize_out_dir(out_dir: &Path) -> Result<Vec<Summary>> {
    if is_experiment_dir(out_dir) {
        return Ok(vec![summarize_dir(out_dir)?]);
    }
    let mut dirs: Vec<PathBuf> = read_dirs(out_dir)?.into_iter().filter(|d| is_experiment_dir(d)).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Aggregation(format!("no run artifacts under {}", out_dir.display())));
    }
    dirs.iter().map(|d| summarize_dir(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn artifact(name: &str, seed: u64, rows: Vec<Vec<f64>>) -> RunArtifact {
        RunArtifact {
            name: name.to_string(),
            seed,
            dir: PathBuf::new(),
            matrix: AccuracyMatrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn single_seed_has_zero_std() {
        let s = Stat::of(&[0.7]).unwrap();
        assert_eq!((s.mean, s.std), (0.7, 0.0));
    }

    #[test]
    fn two_seed_hand_value() {
        let s = Stat::of(&[0.8, 0.9]).unwrap();
        assert_relative_eq!(s.mean, 0.85, epsilon = 1e-15);
        assert_relative_eq!(s.std, 0.070710678118654, epsilon = 1e-12);
        assert_eq!(s.percent(), "85.0 ± 7.1");
    }

    #[test]
    fn summary_statistics() {
        let runs = vec![
            artifact("sgd", 0, vec![vec![0.9], vec![0.6, 0.95]]),
            artifact("sgd", 1, vec![vec![0.8], vec![0.7, 0.97]]),
        ];
        let s = summarize("x", &runs, Vec::new()).unwrap();
        let m = &s.methods[0];
        assert_eq!(m.seeds, vec![0, 1]);
        assert_relative_eq!(m.final_accuracy[0].mean, 0.65, epsilon = 1e-12);
        assert_relative_eq!(m.average_accuracy[0].mean, 0.85, epsilon = 1e-12);
        assert_relative_eq!(m.average_accuracy[1].mean, (0.775 + 0.835) / 2.0, epsilon = 1e-12);
        let f = m.forgetting.unwrap();
        assert_relative_eq!(f.mean, 0.2, epsilon = 1e-12);
        let band = m.average_accuracy_band[0];
        assert_relative_eq!(band.1 - band.0, 6.0 * m.average_accuracy[0].std, epsilon = 1e-12);
    }

    #[test]
    fn inconsistent_task_counts_are_rejected() {
        let runs = vec![
            artifact("sgd", 0, vec![vec![0.9]]),
            artifact("sgd", 1, vec![vec![0.8], vec![0.7, 0.97]]),
        ];
        assert!(matches!(summarize("x", &runs, Vec::new()), Err(Error::Aggregation(_))));
        assert!(matches!(summarize("x", &[], Vec::new()), Err(Error::Aggregation(_))));
    }
}

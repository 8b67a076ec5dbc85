//! Gating report over one run directory's profile checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::profile_file;
use crate::gating::{
    layer_consistency, layer_sparsity, profile_consistency, profile_sparsity, profiles_from_csv, ActivationProfile, Consistency,
    CONSISTENCY_OVERLAP_THRESHOLD, DEFAULT_SPARSITY_TAU,
};
use crate::{Error, Result};

pub const GATING_FILE: &str = "gating.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSparsity {
    pub task_id: usize,
    pub overall: f64,
    pub per_layer: Vec<f64>,
}

/// Sparsity of every task profile recorded after task `after_task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSparsity {
    pub after_task: usize,
    pub tasks: Vec<TaskSparsity>,
}

/// A task's profile right after it was learned vs at the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConsistency {
    pub task_id: usize,
    pub from_checkpoint: usize,
    pub to_checkpoint: usize,
    pub overall: Consistency,
    pub per_layer: Vec<Consistency>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    pub tau: f64,
    pub overlap_threshold: f64,
    pub checkpoints: Vec<CheckpointSparsity>,
    pub consistency: Vec<TaskConsistency>,
}

/// `(after_task, profiles)` for every `profiles_after_task_<k>.csv`, by `k`.
pub fn load_checkpoints(run_dir: &Path) -> Result<Vec<(usize, Vec<ActivationProfile>)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(k) = name
            .strip_prefix("profiles_after_task_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        let path = entry.path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.push((k, profiles_from_csv(&text)?));
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

/// Profile of task `task_id` (0-based) recorded after task `after_task`.
pub fn checkpoint_profile(run_dir: &Path, after_task: usize, task_id: usize) -> Result<ActivationProfile> {
    let path = run_dir.join(profile_file(after_task));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    profiles_from_csv(&text)?
        .into_iter()
        .find(|p| p.task_id == task_id)
        .ok_or_else(|| Error::Data(format!("{} has no profile for task {task_id}", path.display())))
}

pub fn analyze_checkpoints(checkpoints: &[(usize, Vec<ActivationProfile>)], tau: f64) -> Result<GatingReport> {
    let mut sparsity = Vec::new();
    for (k, profiles) in checkpoints {
        let tasks = profiles
            .iter()
            .map(|p| {
                Ok(TaskSparsity {
                    task_id: p.task_id,
                    overall: profile_sparsity(p, tau)?,
                    per_layer: (0..p.layers.len())
                        .map(|l| layer_sparsity(p, l, tau))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        sparsity.push(CheckpointSparsity { after_task: *k, tasks });
    }

    let mut consistency = Vec::new();
    if let Some((last_k, last)) = checkpoints.last() {
        for later in last {
            // Earliest checkpoint that already holds this task.
            let first = checkpoints
                .iter()
                .find_map(|(k, ps)| ps.iter().find(|p| p.task_id == later.task_id).map(|p| (*k, p)));
            let Some((first_k, earlier)) = first else { continue };
            if first_k == *last_k {
                continue;
            }
            let per_layer = (0..later.layers.len())
                .map(|l| layer_consistency(earlier, later, l))
                .collect::<Result<Vec<_>>>()?;
            let overall = profile_consistency(earlier, later)?;
            let consistent = overall.overlap >= CONSISTENCY_OVERLAP_THRESHOLD;
            consistency.push(TaskConsistency {
                task_id: later.task_id,
                from_checkpoint: first_k,
                to_checkpoint: *last_k,
                overall,
                per_layer,
                consistent,
            });
        }
    }
    Ok(GatingReport {
        tau,
        overlap_threshold: CONSISTENCY_OVERLAP_THRESHOLD,
        checkpoints: sparsity,
        consistency,
    })
}

/// Analyze a run directory and write its `gating.json`.
pub fn analyze_run_dir(run_dir: &Path) -> Result<GatingReport> {
    let checkpoints = load_checkpoints(run_dir)?;
    if checkpoints.is_empty() {
        return Err(Error::Data(format!("no profile checkpoints in {}", run_dir.display())));
    }
    let report = analyze_checkpoints(&checkpoints, DEFAULT_SPARSITY_TAU)?;
    let path = run_dir.join(GATING_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

//! Execute methods × seeds and persist every run under
//! `out_dir/<experiment>/<method name>/<seed>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{method_text, ExperimentConfig, ProfileMode};
use crate::data::{load_mnist, make_stream, ImageSet, TaskKind, TaskStream};
use crate::gating::{firing_profile, heatmap_csv, profiles_to_csv, ActivationProfile};
use crate::methods::{train_continual_with, MethodConfig, RunResult};
use crate::metrics::{average_accuracy, forgetting};
use crate::{Error, Result, RNG_NAME};

pub const CONFIG_FILE: &str = "config.txt";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const RUN_FILE: &str = "run.json";
pub const EXPERIMENT_FILE: &str = "experiment.txt";

/// `profiles_after_task_<k>.csv`, `k` 1-based.
pub fn profile_file(after_task: usize) -> String {
    format!("profiles_after_task_{after_task}.csv")
}

/// Final-checkpoint heatmap of hidden layer `layer` (0-based).
pub fn heatmap_file(layer: usize) -> String {
    format!("heatmap_layer_{layer}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub name: String,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub dataset: TaskKind,
    pub tasks: usize,
    /// Seed of the task stream (permutation draws); equals the run seed.
    pub stream_seed: u64,
    pub rng: String,
    pub config: MethodConfig,
    pub elapsed_secs: f64,
    /// `a_{T,i}` for every task, fractions in `[0, 1]`.
    pub final_accuracies: Vec<f64>,
    /// `A_t` for `t = 1..=T`.
    pub average_accuracy: Vec<f64>,
    /// Absent when `T < 2`.
    pub forgetting: Option<f64>,
}

/// Where one run's artifacts live.
pub fn run_dir(config: &ExperimentConfig, name: &str, seed: u64) -> PathBuf {
    config.out_dir.join(&config.experiment).join(name).join(seed.to_string())
}

/// The config snapshot stored with a run: everything that determines it.
pub fn run_snapshot(config: &ExperimentConfig, method: &MethodConfig, seed: u64) -> String {
    format!(
        "experiment = {}\ndataset = {}\ntasks = {}\nseed = {seed}\nrng = {RNG_NAME}\nprofiles = {}\n{}",
        config.experiment,
        config.dataset.as_str(),
        config.tasks,
        config.profiles.as_str(),
        method_text(method)
    )
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Loaded from a previous identical run rather than retrained.
    pub reused: bool,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// A completed run with an identical snapshot is reused.
fn is_complete(dir: &Path, snapshot: &str) -> bool {
    let same = fs::read_to_string(dir.join(CONFIG_FILE)).is_ok_and(|s| s == snapshot);
    let ok = fs::read_to_string(dir.join(RUN_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<RunRecord>(&s).ok())
        .is_some_and(|r| r.status == RunStatus::Ok);
    same && ok && dir.join(MATRIX_FILE).exists()
}

fn profile_all(net: &crate::nn::DenseNet<f32>, stream: &TaskStream, upto: usize) -> Result<Vec<ActivationProfile>> {
    stream.tasks[..upto].iter().map(|t| firing_profile(net, t)).collect()
}

/// Train one `(method, seed)` pair and write its artifacts.
pub fn execute_run(
    config: &ExperimentConfig,
    method: &MethodConfig,
    seed: u64,
    train: Arc<ImageSet>,
    validation: Arc<ImageSet>,
) -> Result<RunResult> {
    let dir = run_dir(config, &method.name, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // Remove stale outputs so a failed rerun cannot leave mixed artifacts.
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.flatten() {
        let _ = fs::remove_file(entry.path());
    }
    let snapshot = run_snapshot(config, method, seed);
    write(&dir.join(CONFIG_FILE), &snapshot)?;

    let stream = make_stream(config.dataset, train, validation, config.tasks, seed)?;
    let last = stream.len() - 1;
    let mut final_profiles = Vec::new();
    let result = train_continual_with(method, &stream, seed, |t, net| {
        let wanted = match config.profiles {
            ProfileMode::All => true,
            ProfileMode::Final => t == last,
            ProfileMode::None => false,
        };
        if wanted {
            let profiles = profile_all(net, &stream, t + 1)?;
            write(&dir.join(profile_file(t + 1)), &profiles_to_csv(&profiles))?;
            if t == last {
                final_profiles = profiles;
            }
        }
        Ok(())
    })?;

    if !final_profiles.is_empty() {
        for layer in 0..final_profiles[0].layers.len() {
            write(&dir.join(heatmap_file(layer)), &heatmap_csv(&final_profiles, layer)?)?;
        }
    }
    write(&dir.join(MATRIX_FILE), &result.accuracy.to_csv())?;
    write(&dir.join(CURVES_FILE), &result.curves_csv())?;
    let record = RunRecord {
        experiment: config.experiment.clone(),
        name: method.name.clone(),
        seed,
        status: RunStatus::Ok,
        error: None,
        dataset: config.dataset,
        tasks: config.tasks,
        stream_seed: seed,
        rng: RNG_NAME.to_string(),
        config: method.clone(),
        elapsed_secs: result.elapsed_secs,
        final_accuracies: result.accuracy.final_row().unwrap_or_default().to_vec(),
        average_accuracy: (1..=result.accuracy.filled())
            .map(|t| average_accuracy(&result.accuracy, t))
            .collect::<Result<_>>()?,
        forgetting: (result.accuracy.num_tasks() >= 2)
            .then(|| forgetting(&result.accuracy))
            .transpose()?,
    };
    write(&dir.join(RUN_FILE), &serde_json::to_string_pretty(&record)?)?;
    Ok(result)
}

fn record_failure(config: &ExperimentConfig, method: &MethodConfig, seed: u64, err: &Error) {
    let dir = run_dir(config, &method.name, seed);
    let record = RunRecord {
        experiment: config.experiment.clone(),
        name: method.name.clone(),
        seed,
        status: RunStatus::Failed,
        error: Some(err.to_string()),
        dataset: config.dataset,
        tasks: config.tasks,
        stream_seed: seed,
        rng: RNG_NAME.to_string(),
        config: method.clone(),
        elapsed_secs: 0.0,
        final_accuracies: Vec::new(),
        average_accuracy: Vec::new(),
        forgetting: None,
    };
    if fs::create_dir_all(&dir).is_ok() {
        if let Ok(json) = serde_json::to_string_pretty(&record) {
            let _ = fs::write(dir.join(RUN_FILE), json);
        }
    }
}

/// Run every `(method, seed)` pair, up to `jobs` at a time. Runs whose
/// directory already holds a successful result with the same snapshot are
/// skipped. A failing run is recorded in its `run.json` and the others
/// continue. Loading the data is the only fatal step.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let (train, validation) = load_mnist(&config.data_dir)?;
    run_experiment_on(config, Arc::new(train), Arc::new(validation), jobs)
}

/// [`run_experiment`] on already-loaded base data.
pub fn run_experiment_on(
    config: &ExperimentConfig,
    train: Arc<ImageSet>,
    validation: Arc<ImageSet>,
    jobs: usize,
) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let exp_dir = config.out_dir.join(&config.experiment);
    fs::create_dir_all(&exp_dir).map_err(|e| Error::io(&exp_dir, e))?;
    write(&exp_dir.join(EXPERIMENT_FILE), &config.to_text())?;

    let queue: Vec<(&MethodConfig, u64)> = config
        .methods
        .iter()
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let outcomes = Mutex::new(Vec::with_capacity(queue.len()));
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(method, seed)) = queue.get(i) else {
            break;
        };
        let dir = run_dir(config, &method.name, seed);
        let outcome = if is_complete(&dir, &run_snapshot(config, method, seed)) {
            log::info!("{} seed {seed}: reusing {}", method.name, dir.display());
            RunOutcome {
                name: method.name.clone(),
                seed,
                dir,
                status: RunStatus::Ok,
                error: None,
                reused: true,
            }
        } else {
            log::info!("{} seed {seed}: starting", method.name);
            match execute_run(config, method, seed, train.clone(), validation.clone()) {
                Ok(r) => {
                    log::info!("{} seed {seed}: finished in {:.1}s", method.name, r.elapsed_secs);
                    RunOutcome {
                        name: method.name.clone(),
                        seed,
                        dir,
                        status: RunStatus::Ok,
                        error: None,
                        reused: false,
                    }
                }
                Err(e) => {
                    log::error!("{} seed {seed}: {e}", method.name);
                    record_failure(config, method, seed, &e);
                    RunOutcome {
                        name: method.name.clone(),
                        seed,
                        dir,
                        status: RunStatus::Failed,
                        error: Some(e.to_string()),
                        reused: false,
                    }
                }
            }
        };
        outcomes.lock().expect("no worker panics while holding the lock").push((i, outcome));
    };
    let jobs = jobs.clamp(1, queue.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(worker);
        }
    });
    let mut outcomes = outcomes.into_inner().expect("workers joined");
    outcomes.sort_by_key(|(i, _)| *i);
    Ok(outcomes.into_iter().map(|(_, o)| o).collect())
}

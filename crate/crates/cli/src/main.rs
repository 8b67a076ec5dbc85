use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use dropgate::harness::{
    analyze_run_dir, run_experiment, summarize_dir, summarize_out_dir, ExperimentConfig, GatingReport, Preset,
    RunStatus, Summary,
};
use dropgate::Error;

#[derive(Parser)]
#[command(name = "dropgate", version, about = "Continual-learning lab on permuted/rotated MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every method × seed of an experiment and write its artifacts.
    #[command(group(ArgGroup::new("source").required(true).args(["preset", "config"])))]
    Run {
        /// table1, table2, fig1, fig2, fig3, fig45, fig6 or sweep-dropout.
        #[arg(long)]
        preset: Option<Preset>,
        /// Flat `key = value` experiment file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the four MNIST IDX files.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated seeds replacing the configured ones.
        #[arg(long, value_delimiter = ',')]
        seed_list: Option<Vec<u64>>,
    },
    /// Aggregate finished runs across seeds into summary.json.
    Summarize {
        /// An experiment directory, or a directory of experiment directories.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sparsity and gate consistency of a run's firing profiles.
    AnalyzeGating {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Format(_) | Error::Truncated { .. } | Error::Io { .. } | Error::Aggregation(_) => {
            EXIT_DATA
        }
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors are config errors; clap's default code 2 is taken by data.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            preset,
            config,
            data_dir,
            out_dir,
            jobs,
            seed_list,
        } => load_config(preset, config.as_deref(), data_dir, out_dir, seed_list)
            .map_err(|e| (EXIT_CONFIG, e))
            .and_then(|c| run(&c, jobs)),
        Command::Summarize { out_dir } => summarize_out_dir(&out_dir)
            .map(|s| s.iter().for_each(print_summary))
            .map_err(|e| (exit_code(&e), e)),
        Command::AnalyzeGating { run_dir } => analyze_run_dir(&run_dir)
            .map(|r| print_gating(&run_dir, &r))
            .map_err(|e| (exit_code(&e), e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn load_config(
    preset: Option<Preset>,
    path: Option<&Path>,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
) -> dropgate::Result<ExperimentConfig> {
    let mut config = match (preset, path) {
        (Some(p), _) => ExperimentConfig::preset(p),
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => unreachable!("clap requires --preset or --config"),
    };
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    if let Some(d) = out_dir {
        config.out_dir = d;
    }
    if let Some(s) = seeds {
        config.seeds = s;
    }
    config.validate()?;
    Ok(config)
}

fn run(config: &ExperimentConfig, jobs: usize) -> Result<(), (u8, Error)> {
    let outcomes = run_experiment(config, jobs).map_err(|e| (exit_code(&e), e))?;
    let failed: Vec<_> = outcomes.iter().filter(|o| o.status == RunStatus::Failed).collect();
    match summarize_dir(&config.out_dir.join(&config.experiment)) {
        Ok(s) => print_summary(&s),
        Err(e) => log::warn!("no summary: {e}"),
    }
    if failed.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = failed
        .iter()
        .map(|o| format!("{} seed {}: {}", o.name, o.seed, o.error.as_deref().unwrap_or("unknown")))
        .collect();
    Err((
        EXIT_RUNTIME,
        Error::Runtime(format!("{} of {} runs failed:\n  {}", failed.len(), outcomes.len(), lines.join("\n  "))),
    ))
}

fn print_summary(s: &Summary) {
    println!("{} (T = {})", s.experiment, s.tasks);
    for m in &s.methods {
        let forgetting = m.forgetting.map(|f| format!("  F = {}", f.percent())).unwrap_or_default();
        let last = m.average_accuracy.last().map(|a| a.percent()).unwrap_or_default();
        println!(
            "  {:<14} n={}  A_T = {last}{forgetting}\n    final: {}",
            m.name,
            m.seeds.len(),
            m.table_row.join(" | ")
        );
    }
    for f in &s.failed_runs {
        println!("  failed: {} seed {}: {}", f.name, f.seed, f.error);
    }
}

fn print_gating(dir: &Path, r: &GatingReport) {
    println!("{} (tau = {})", dir.display(), r.tau);
    for c in &r.checkpoints {
        let cells: Vec<String> = c.tasks.iter().map(|t| format!("{:.3}", t.overall)).collect();
        println!("  sparsity after task {}: {}", c.after_task, cells.join(" "));
    }
    for c in &r.consistency {
        let pearson = c.overall.pearson.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into());
        println!(
            "  task {} ({} -> {}): overlap {:.3}, pearson {pearson}{}",
            c.task_id + 1,
            c.from_checkpoint,
            c.to_checkpoint,
            c.overall.overlap,
            if c.consistent { "" } else { "  (below threshold)" }
        );
    }
}

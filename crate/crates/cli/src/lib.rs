//! Command-line front end: scripted demo generation, config-driven training
//! runs, the exact-arithmetic verification suite, and run comparison tables.
//!
//! Exit codes are part of the contract: 0 on success, 2 for configuration
//! and input errors (clap uses 2 for usage errors too), 3 when the
//! verification suite reaches a failing verdict, 1 for runtime failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aawr_core::envs::{
    camouflage_line, hidden_target_grid, read_records, scripted_demo_rollouts, tiger, write_records,
    EnvCatalogEntry,
};
use aawr_core::losses::TrainingConfig;
use aawr_core::trainer::{
    read_metrics_csv, write_checkpoint, write_metrics_csv, EvalSettings, Method, MetricsRow,
    RunManifest, Trainer,
};
use aawr_core::verify::{run_verification, VerifyReport};
use aawr_core::{CoreError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Maps an error to the process exit code. Bad inputs and configs are
/// distinguished from runtime failures (solver divergence, I/O mid-run).
pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::InvalidSpec(_)
        | CoreError::InvalidConfig(_)
        | CoreError::Shape(_)
        | CoreError::Parse { .. }
        | CoreError::MissingData(_)
        | CoreError::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "aawr",
    version,
    about = "Offline-to-online RL with privileged critics on tabular POMDPs"
)]
pub struct Cli {
    /// Overrides the seed from the config file (train) or the default (demo).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a scripted demonstration dataset for a catalog environment.
    Demo {
        /// Environment name from the catalog.
        #[arg(long)]
        env: String,
        /// Number of episodes to roll out.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy from a JSON run config.
    Train {
        /// Path to the run config.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every analytical self-check and report the verdicts.
    Verify {
        /// Also write the report as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished training runs into a comparison table.
    Compare {
        /// Run directories produced by `train` (each holds metrics.csv and
        /// manifest.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Success rate that defines steps-to-threshold.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Also write the machine-readable rows as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// Run configuration.
// ---------------------------------------------------------------------------

/// Environment selection: a catalog name plus optional constructor
/// parameters. Unset parameters fall back to the shipped catalog values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    pub listen_accuracy: Option<f64>,
    pub penalty: Option<f64>,
    pub prize: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub fov: Option<usize>,
    pub n_cells: Option<usize>,
    pub obs_noise: Option<f64>,
}

impl EnvConfig {
    pub fn build(&self) -> Result<EnvCatalogEntry> {
        let set: Vec<&'static str> = [
            ("listen_accuracy", self.listen_accuracy.is_some()),
            ("penalty", self.penalty.is_some()),
            ("prize", self.prize.is_some()),
            ("width", self.width.is_some()),
            ("height", self.height.is_some()),
            ("fov", self.fov.is_some()),
            ("n_cells", self.n_cells.is_some()),
            ("obs_noise", self.obs_noise.is_some()),
        ]
        .iter()
        .filter(|(_, s)| *s)
        .map(|(k, _)| *k)
        .collect();
        let canonical = self.name.replace('_', "-");
        let allowed: &[&str] = match canonical.as_str() {
            "tiger" => &["listen_accuracy", "penalty", "prize"],
            "hidden-target-grid" => &["width", "height", "fov"],
            "camouflage-line" => &["n_cells", "obs_noise"],
            _ => &[],
        };
        if let Some(bad) = set.iter().find(|k| !allowed.contains(k)) {
            return Err(CoreError::InvalidConfig(format!(
                "env parameter `{bad}` does not apply to `{}`",
                self.name
            )));
        }
        match canonical.as_str() {
            "tiger" => tiger(
                self.listen_accuracy.unwrap_or(0.85),
                self.penalty.unwrap_or(-100.0),
                self.prize.unwrap_or(10.0),
            ),
            "hidden-target-grid" => hidden_target_grid(
                self.width.unwrap_or(5),
                self.height.unwrap_or(5),
                self.fov.unwrap_or(1),
            ),
            "camouflage-line" => {
                camouflage_line(self.n_cells.unwrap_or(5), self.obs_noise.unwrap_or(0.25))
            }
            other => aawr_core::envs::entry(other),
        }
    }
}

/// One training run: environment, method, data, budgets, output location.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub method: Method,
    /// Demonstration record file to preload into the offline buffer.
    #[serde(default)]
    pub demos: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

/// Parses a run config, filling the window length from the catalog entry
/// when the file does not set `training.k` itself.
pub fn load_run_config(text: &str) -> Result<(RunConfig, EnvCatalogEntry)> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    let entry = cfg.env.build()?;
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let mut cfg = cfg;
    if raw
        .get("training")
        .and_then(|t| t.get("k"))
        .is_none()
    {
        cfg.training.k = entry.default_k;
    }
    cfg.training.validate()?;
    Ok((cfg, entry))
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

pub fn cmd_demo(env: &str, episodes: usize, seed: u64, out: &Path) -> Result<()> {
    let entry = aawr_core::envs::entry(env)?;
    let eps = scripted_demo_rollouts(&entry, episodes, seed, true);
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_records(out, &eps)?;
    let steps: usize = eps.iter().map(|e| e.records.len()).sum();
    let successes = eps
        .iter()
        .filter(|e| e.total_reward() > entry.success_floor)
        .count();
    println!(
        "wrote {episodes} episodes ({steps} steps, {successes} above the success floor) to {}",
        out.display()
    );
    Ok(())
}

/// Trains one run end to end and returns the run directory.
pub fn cmd_train(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CoreError::InvalidConfig(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let (mut cfg, entry) = load_run_config(&text)?;
    if let Some(seed) = seed_override {
        cfg.training.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out_dir = out.to_path_buf();
    }
    let trains = cfg.training.n_off > 0 || cfg.training.n_on > 0;
    if trains && cfg.demos.is_none() {
        return Err(CoreError::InvalidConfig(
            "a demos file is required when n_off or n_on is nonzero".into(),
        ));
    }
    let mut trainer = Trainer::new(&entry, cfg.training.clone(), cfg.method, cfg.eval)?;
    if let Some(path) = &cfg.demos {
        let episodes = read_records(path).map_err(|e| match e {
            CoreError::Io(io) => {
                CoreError::InvalidConfig(format!("cannot read demos {}: {io}", path.display()))
            }
            other => other,
        })?;
        if trains && episodes.is_empty() {
            return Err(CoreError::InvalidConfig(format!(
                "demos file {} holds no episodes",
                path.display()
            )));
        }
        trainer.load_demos(&episodes)?;
    }
    fs::create_dir_all(&cfg.out_dir)?;

    trainer.offline_phase()?;
    write_checkpoint(&cfg.out_dir.join("checkpoint_offline.bin"), &trainer.checkpoint())?;
    trainer.online_phase()?;
    write_checkpoint(&cfg.out_dir.join("checkpoint_final.bin"), &trainer.checkpoint())?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &trainer.metrics)?;
    let manifest = RunManifest {
        version: format!(
            "aawr {} ({})",
            env!("CARGO_PKG_VERSION"),
            option_env!("AAWR_BUILD_REV").unwrap_or("untracked")
        ),
        env: entry.name.clone(),
        method: cfg.method.as_str().to_string(),
        seed: cfg.training.seed,
        config_echo: text,
    };
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if let Some(last) = trainer.metrics.last() {
        println!(
            "{} (seed {}) done: {} metric rows, final success {:.3}, mean return {:.3} -> {}",
            cfg.method.as_str(),
            cfg.training.seed,
            trainer.metrics.len(),
            last.success_rate,
            last.mean_return,
            cfg.out_dir.display()
        );
    }
    Ok(cfg.out_dir)
}

pub fn cmd_verify(out: Option<&Path>) -> Result<VerifyReport> {
    let report = run_verification()?;
    print!("{}", report.render_text());
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, report.to_json()?)?;
        println!("report written to {}", path.display());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Run comparison.
// ---------------------------------------------------------------------------

/// Aggregate over the runs of one (env, method) group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub env: String,
    pub method: String,
    pub n_runs: usize,
    pub final_success_mean: f64,
    pub final_success_stderr: f64,
    pub final_return_mean: f64,
    /// Mean environment step count at which runs first reach the threshold,
    /// over the runs that reached it at all.
    pub steps_to_threshold_mean: Option<f64>,
    pub n_reached: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean with sample (n-1) variance; 0 for a single run.
fn stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

fn read_run(dir: &Path) -> Result<(RunManifest, Vec<MetricsRow>)> {
    let metrics_path = dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(CoreError::MissingData(format!(
            "run directory {} has no metrics.csv",
            dir.display()
        )));
    }
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CoreError::MissingData(format!(
            "run directory {} has no manifest.json",
            dir.display()
        )));
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let rows = read_metrics_csv(&metrics_path)?;
    if rows.is_empty() {
        return Err(CoreError::MissingData(format!(
            "run directory {} has an empty metrics.csv",
            dir.display()
        )));
    }
    Ok((manifest, rows))
}

/// Groups runs by (env, method), never pooling across environments, and
/// aggregates final success, final return, and steps-to-threshold.
pub fn summarize_runs(dirs: &[PathBuf], threshold: f64) -> Result<Vec<CompareRow>> {
    let mut groups: BTreeMap<(String, String), Vec<Vec<MetricsRow>>> = BTreeMap::new();
    for dir in dirs {
        let (manifest, rows) = read_run(dir)?;
        groups
            .entry((manifest.env, manifest.method))
            .or_default()
            .push(rows);
    }
    let mut out = Vec::new();
    for ((env, method), runs) in groups {
        let finals: Vec<&MetricsRow> = runs.iter().map(|r| r.last().unwrap()).collect();
        let success: Vec<f64> = finals.iter().map(|r| r.success_rate).collect();
        let returns: Vec<f64> = finals.iter().map(|r| r.mean_return).collect();
        let reached: Vec<f64> = runs
            .iter()
            .filter_map(|rows| {
                rows.iter()
                    .find(|r| r.success_rate >= threshold)
                    .map(|r| r.env_step as f64)
            })
            .collect();
        out.push(CompareRow {
            env,
            method,
            n_runs: runs.len(),
            final_success_mean: mean(&success),
            final_success_stderr: stderr(&success),
            final_return_mean: mean(&returns),
            steps_to_threshold_mean: if reached.is_empty() {
                None
            } else {
                Some(mean(&reached))
            },
            n_reached: reached.len(),
        });
    }
    Ok(out)
}

pub fn render_compare_table(rows: &[CompareRow], threshold: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:<6} {:>4}  {:>20}  {:>12}  steps-to-{threshold}\n",
        "env", "method", "runs", "final success", "final return"
    ));
    for r in rows {
        let steps = match r.steps_to_threshold_mean {
            Some(s) => format!("{s:.0} ({}/{} runs)", r.n_reached, r.n_runs),
            None => format!("not reached (0/{} runs)", r.n_runs),
        };
        out.push_str(&format!(
            "{:<22} {:<6} {:>4}  {:>11.3} ± {:>6.3}  {:>12.3}  {steps}\n",
            r.env, r.method, r.n_runs, r.final_success_mean, r.final_success_stderr, r.final_return_mean
        ));
    }
    out
}

pub fn compare_rows_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "env,method,n_runs,final_success_mean,final_success_stderr,final_return_mean,\
         steps_to_threshold_mean,n_reached\n",
    );
    for r in rows {
        let steps = r
            .steps_to_threshold_mean
            .map(|s| s.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.env,
            r.method,
            r.n_runs,
            r.final_success_mean,
            r.final_success_stderr,
            r.final_return_mean,
            steps,
            r.n_reached
        ));
    }
    out
}

pub fn cmd_compare(dirs: &[PathBuf], threshold: f64, out: Option<&Path>) -> Result<()> {
    let rows = summarize_runs(dirs, threshold)?;
    print!("{}", render_compare_table(&rows, threshold));
    let csv = compare_rows_csv(&rows);
    println!("\n{csv}");
    if let Some(path) = out {
        fs::write(path, csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point.
// ---------------------------------------------------------------------------

/// Dispatches a parsed command line; the returned code is the process exit
/// status.
pub fn run(cli: Cli) -> i32 {
    let result: Result<i32> = match cli.command {
        Command::Demo {
            env,
            episodes,
            out,
        } => cmd_demo(&env, episodes, cli.seed.unwrap_or(0), &out).map(|()| EXIT_OK),
        Command::Train { config, out } => {
            cmd_train(&config, out.as_deref(), cli.seed).map(|_| EXIT_OK)
        }
        Command::Verify { out } => cmd_verify(out.as_deref()).map(|report| {
            if report.passed {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }),
        Command::Compare {
            runs,
            threshold,
            out,
        } => cmd_compare(&runs, threshold, out.as_deref()).map(|()| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

pub fn main_entry() -> i32 {
    run(Cli::parse())
}

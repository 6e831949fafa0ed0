//! Command configuration.
//!
//! Values are resolved in three layers: built-in defaults, then the
//! `--config` file, then command-line flags. The config file is TOML with
//! one table per command:
//!
//! ```toml
//! [schedule]
//! gamma = 0.95
//! horizon = 100
//! budget = 5000
//!
//! [optimize]
//! env = "corridor-dense"
//! hidden = [64, 32]
//! ```
//!
//! A `manifest.json` written by a previous run is also accepted as
//! `--config`; its resolved configuration is replayed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "trunc-mc",
    version,
    about = "Truncated-trajectory Monte Carlo schedules, estimators and TT-POIS"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal data collection schedule for (gamma, horizon, budget).
    Schedule(ScheduleArgs),
    /// Mean squared error study on the milestone MDP.
    Evaluate(EvaluateArgs),
    /// TT-POIS / POIS learning curves.
    Optimize(OptimizeArgs),
    /// PAC budget calculator.
    Pac(PacArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Schedule(_) => "schedule",
            Command::Evaluate(_) => "evaluate",
            Command::Optimize(_) => "optimize",
            Command::Pac(_) => "pac",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file or a previous run's manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScheduleArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub gamma: f64,
    pub horizon: usize,
    pub budget: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcsChoice {
    Optimal,
    Uniform,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Only `milestone` has a closed-form ground truth.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<u64>>,
    /// `on` or `off`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// `optimal`, `uniform` or `both`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcs: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Target action probabilities for off-policy mode.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub env: String,
    pub horizon: usize,
    pub gamma: f64,
    pub budgets: Vec<u64>,
    pub mode: EstimationMode,
    pub dcs: DcsChoice,
    pub repeats: usize,
    pub seed: u64,
    pub delta: f64,
    pub target: Vec<f64>,
    pub behavior: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizeEnv {
    CorridorSparse,
    CorridorDense,
    Dam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoChoice {
    Ttpois,
    Pois,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// `corridor-sparse`, `corridor-dense` or `dam`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    /// `ttpois`, `pois` or `both`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algo: Option<String>,
    /// Number of seeds in the sweep.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline_iterations: Option<usize>,
    /// 0 disables clipping.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iw_clip: Option<f64>,
    /// 0 disables the floor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_min_max: Option<f64>,
    /// Hidden layer sizes; empty for a linear softmax policy.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_episodes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub env: OptimizeEnv,
    pub algo: AlgoChoice,
    pub seeds: usize,
    pub seed: u64,
    pub gamma: f64,
    pub budget: u64,
    pub delta: f64,
    pub online_iterations: usize,
    pub offline_iterations: usize,
    pub iw_clip: f64,
    pub r_min_max: f64,
    pub hidden: Vec<usize>,
    pub output_gain: f64,
    pub eval_episodes: usize,
    pub p_success: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub max_halvings: u32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PacArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PacConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub horizon: usize,
}

fn defaults(command: &str) -> Value {
    match command {
        "schedule" => json!({ "delta": 0.1 }),
        "evaluate" => json!({
            "env": "milestone",
            "horizon": 100,
            "gamma": 0.95,
            "budgets": [500, 1000, 2000, 5000],
            "mode": "on",
            "dcs": "both",
            "repeats": 50,
            "seed": 0,
            "delta": 0.1,
            "target": [0.49, 0.51],
            "behavior": [0.5, 0.5],
        }),
        "optimize" => json!({
            "env": "corridor-dense",
            "algo": "both",
            "seeds": 5,
            "seed": 0,
            "gamma": 0.99,
            "budget": 15000,
            "delta": 0.7,
            "online_iterations": 40,
            "offline_iterations": 10,
            "iw_clip": 100.0,
            "r_min_max": 0.0,
            "hidden": [64, 32],
            "output_gain": 0.01,
            "eval_episodes": 20,
            "p_success": 0.9,
            "initial_step": 1.0,
            "shrink": 0.5,
            "max_halvings": 30,
        }),
        "pac" => json!({ "delta": 0.1 }),
        _ => json!({}),
    }
}

/// Reads the `command` section of a TOML config, or the resolved config of a manifest.
pub fn load_config_layer(path: &Path, command: &str) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Args(format!("{}: {e}", path.display())))?;
        let recorded = manifest.get("command").and_then(Value::as_str).unwrap_or("");
        if recorded != command {
            return Err(CliError::Args(format!(
                "manifest {} was written by `{recorded}`, not `{command}`",
                path.display()
            )));
        }
        return manifest
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Args(format!("manifest {} has no config", path.display())));
    }
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Args(format!("{}: {e}", path.display())))?;
    match table.get(command) {
        Some(section) => serde_json::to_value(section).map_err(|e| CliError::Args(e.to_string())),
        None => Ok(Value::Object(Map::new())),
    }
}

fn overlay(base: &mut Value, layer: Value) -> CliResult<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            b.extend(l);
            Ok(())
        }
        _ => Err(CliError::Args("config sections must be tables".into())),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve<T: DeserializeOwned>(command: &str, common: &Common, flags: &impl Serialize) -> CliResult<T> {
    let mut value = defaults(command);
    if let Some(path) = &common.config {
        overlay(&mut value, load_config_layer(path, command)?)?;
    }
    overlay(
        &mut value,
        serde_json::to_value(flags).map_err(|e| CliError::Args(e.to_string()))?,
    )?;
    serde_json::from_value(value).map_err(|e| CliError::Args(format!("{command} configuration: {e}")))
}

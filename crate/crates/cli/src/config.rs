//! Command-line arguments, the optional TOML config file and their merge.
//!
//! Every option is optional on the command line. The effective value is the
//! flag if given, else the entry of the config file, else the default of the
//! resolved struct.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "icpoint",
    version,
    about = "Fit, simulate and evaluate intermittent-control pointing models"
)]
pub struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Master seed recorded in every manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with top-level `seed`/`jobs` and per-command tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory used for relative or missing `--data` paths.
    #[arg(long, global = true, env = "ICPOINT_DATA")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the last slices of a recorded block and build a model bank.
    Fit(FitArgs),
    /// Run switching simulations from a model bank, or a 2ol baseline.
    Simulate(SimulateArgs),
    /// Compare simulated trajectories with a recording.
    Evaluate(EvaluateArgs),
    /// Write the parameter matrix of one or more fit files.
    ExportParams(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Evaluate(_) => "evaluate",
            Command::ExportParams(_) => "export-params",
        }
    }
}

/// Column and unit options shared by commands that read recordings.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Time column (default `t`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_time: Option<String>,
    /// Target position column (default `target`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_target: Option<String>,
    /// Pointer position column (default `y`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_pos: Option<String>,
    /// Velocity column; derived from position when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col_vel: Option<String>,
    /// mm, m or auto.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    /// Savitzky-Golay smoothing of derived velocity (true/false).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smooth: Option<bool>,
}

/// Condition labels: participant, distance and width.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ConditionArgs {
    /// Participant label; with a directory `--data`, reads `<participant>.csv`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participant: Option<String>,
    /// Movement distance in mm (default: inferred from the target range).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    /// Target width in mm; needed to label the condition's ID.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Recorded block CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory (default `fit_out`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// full or reduced.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set: Option<String>,
    /// Cost evaluations per pattern search.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    /// Pattern searches per slice (initial point plus random starts).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starts: Option<usize>,
    /// Local restarts from the best point with a rotated poll basis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub polish_rounds: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub condition: ConditionArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// bank.json written by `fit`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    /// Output directory (default `sim_out`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Number of switching runs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    /// Replay the target schedule of this recording.
    #[arg(long, conflicts_with_all = ["distance", "changes", "period"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Distance of a synthetic reciprocal schedule, mm.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    /// Number of target changes of a synthetic schedule.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub changes: Option<usize>,
    /// Seconds between target changes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    /// Seconds before the first change.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lead: Option<f64>,
    /// Only `2ol` is supported.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// 2ol natural frequency, rad/s.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// 2ol damping ratio.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    /// Standard deviation of the additive motor noise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motor_noise: Option<f64>,
    /// Standard deviation of the position measurement noise, m.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensor_noise: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Recorded block CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// A trajectory CSV or a directory of them.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sims: Option<PathBuf>,
    /// Baseline trajectory CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    /// Output directory (default `eval_out`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write the parameter matrix of `--fits`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_params: Option<bool>,
    /// fits.json written by `fit`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fits: Option<PathBuf>,
    /// Grid size of the density estimates per axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Bin width of the open-loop-interval histogram, seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ol_bin: Option<f64>,
    /// Neuromuscular time constant used to rebuild the LQR gains, s.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nms_time_constant: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub condition: ConditionArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    /// fits.json files written by `fit`.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fits: Option<Vec<PathBuf>>,
    /// Output directory (default `params_out`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Neuromuscular time constant used to rebuild the LQR gains, s.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nms_time_constant: Option<f64>,
}

/// Effective input options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Input {
    pub col_time: String,
    pub col_target: String,
    pub col_pos: String,
    pub col_vel: Option<String>,
    pub units: String,
    pub smooth: bool,
}

impl Default for Input {
    fn default() -> Self {
        Self {
            col_time: "t".into(),
            col_target: "target".into(),
            col_pos: "y".into(),
            col_vel: None,
            units: "auto".into(),
            smooth: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Condition {
    pub participant: Option<String>,
    pub distance: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub set: String,
    pub max_evals: usize,
    pub starts: usize,
    pub polish_rounds: usize,
    #[serde(flatten)]
    pub input: Input,
    #[serde(flatten)]
    pub condition: Condition,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            out: "fit_out".into(),
            set: "full".into(),
            max_evals: 2000,
            starts: 1,
            polish_rounds: 0,
            input: Input::default(),
            condition: Condition::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub seed: u64,
    pub bank: Option<PathBuf>,
    pub out: PathBuf,
    pub runs: usize,
    pub data: Option<PathBuf>,
    pub distance: Option<f64>,
    pub changes: Option<usize>,
    pub period: Option<f64>,
    pub lead: f64,
    pub baseline: Option<String>,
    pub omega: Option<f64>,
    pub zeta: Option<f64>,
    pub motor_noise: f64,
    pub sensor_noise: f64,
    #[serde(flatten)]
    pub input: Input,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bank: None,
            out: "sim_out".into(),
            runs: 200,
            data: None,
            distance: None,
            changes: None,
            period: None,
            lead: 0.5,
            baseline: None,
            omega: None,
            zeta: None,
            motor_noise: 0.0,
            sensor_noise: 0.0,
            input: Input::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub sims: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub out: PathBuf,
    pub export_params: bool,
    pub fits: Option<PathBuf>,
    pub bins: usize,
    pub ol_bin: f64,
    pub nms_time_constant: f64,
    #[serde(flatten)]
    pub input: Input,
    #[serde(flatten)]
    pub condition: Condition,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            sims: None,
            baseline: None,
            out: "eval_out".into(),
            export_params: false,
            fits: None,
            bins: icpoint::analysis::DEFAULT_BINS,
            ol_bin: icpoint::analysis::DEFAULT_OL_BIN,
            nms_time_constant: icpoint::plant::DEFAULT_NMS_TC,
            input: Input::default(),
            condition: Condition::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub seed: u64,
    pub fits: Vec<PathBuf>,
    pub out: PathBuf,
    pub nms_time_constant: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fits: Vec::new(),
            out: "params_out".into(),
            nms_time_constant: icpoint::plant::DEFAULT_NMS_TC,
        }
    }
}

/// Parsed config file: top-level `seed` and `jobs` plus one table per command.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        match serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))? {
            Value::Object(root) => Ok(Self { root }),
            _ => Err(CliError::Usage("config file must be a table".into())),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>, CliError> {
        self.root
            .get("seed")
            .map(|v| {
                v.as_u64().ok_or_else(|| {
                    CliError::Usage("config seed must be a non-negative integer".into())
                })
            })
            .transpose()
    }

    pub fn jobs(&self) -> Result<Option<usize>, CliError> {
        self.root
            .get("jobs")
            .map(|v| {
                v.as_u64()
                    .map(|j| j as usize)
                    .ok_or_else(|| CliError::Usage("config jobs must be a positive integer".into()))
            })
            .transpose()
    }

    fn section(&self, command: &str) -> Map<String, Value> {
        match self.root.get(command) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        }
    }
}

/// Resolves `T` from flags over the file's `[command]` table over defaults.
pub fn resolve<A: Serialize, T: DeserializeOwned>(
    flags: &A,
    file: &ConfigFile,
    command: &str,
    seed: u64,
) -> Result<T, CliError> {
    let mut merged = file.section(command);
    if let Value::Object(f) =
        serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?
    {
        merged.extend(f);
    }
    merged.insert("seed".into(), Value::from(seed));
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("invalid [{command}] configuration: {e}")))
}

/// SHA-256 of the canonical JSON of the effective configuration.
pub fn config_hash(effective: &Value) -> String {
    let digest = Sha256::digest(effective.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

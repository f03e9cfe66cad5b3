//! Study configuration file (TOML). Every section except the top-level
//! identity keys is optional; see `configs/demo.toml` for a commented
//! example.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::server::{ServerConfig, StudyLayout};
use crate::sim_dye::{DyeConfig, DYE_FIELD};
use crate::stats::{StatisticsConfig, StepSchedule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid study configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub n_sims: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timesteps")]
    pub n_timesteps: u32,
    #[serde(default = "default_fields")]
    pub fields: Vec<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Keep every raw sample for oracle comparisons (desk scale only).
    #[serde(default)]
    pub store_raw: bool,
    #[serde(default)]
    pub simulation: DyeConfig,
    #[serde(default)]
    pub statistics: StatisticsSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub launcher: LauncherSection,
    #[serde(default)]
    pub faults: FaultSection,
}

fn default_timesteps() -> u32 {
    100
}

fn default_fields() -> Vec<String> {
    vec![DYE_FIELD.into()]
}

fn default_output() -> PathBuf {
    PathBuf::from("ensemble-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsSection {
    /// Quantile orders; the 99 percentiles when absent.
    #[serde(default)]
    pub quantiles: Option<Vec<f64>>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub schedule: StepSchedule,
}

fn one() -> f64 {
    1.0
}

impl Default for StatisticsSection {
    fn default() -> Self {
        StatisticsSection { quantiles: None, thresholds: Vec::new(), gain: 1.0, schedule: StepSchedule::Linear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub ranks: u32,
    pub checkpoint_period_secs: f64,
    pub idle_timeout_secs: f64,
    pub heartbeat_period_secs: f64,
    pub record_log: bool,
    pub queue_depth: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            ranks: 2,
            checkpoint_period_secs: 5.0,
            idle_timeout_secs: 60.0,
            heartbeat_period_secs: 0.5,
            record_log: false,
            queue_depth: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapChange {
    pub after_secs: f64,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LauncherSection {
    pub max_concurrent: usize,
    /// Concurrency cap changes over study time; the last entry whose time has
    /// passed applies.
    pub cap_schedule: Vec<CapChange>,
    /// Failed attempts tolerated per simulation.
    pub retry_budget: u32,
    pub server_restart_budget: u32,
    pub heartbeat_timeout_secs: f64,
    /// Heartbeat silence before the server is reported suspect.
    pub heartbeat_suspect_secs: f64,
    pub sim_wall_limit_secs: f64,
    pub poll_interval_ms: u64,
    /// Sleep inserted before each simulation output step.
    pub step_delay_ms: u64,
    /// Executable providing the `server` and `simulate` subcommands; the
    /// running binary when absent.
    pub executable: Option<PathBuf>,
}

impl Default for LauncherSection {
    fn default() -> Self {
        LauncherSection {
            max_concurrent: 4,
            cap_schedule: Vec::new(),
            retry_budget: 3,
            server_restart_budget: 2,
            heartbeat_timeout_secs: 10.0,
            heartbeat_suspect_secs: 3.0,
            sim_wall_limit_secs: 600.0,
            poll_interval_ms: 20,
            step_delay_ms: 0,
            executable: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub sim: u64,
    /// The simulation exits with status 17 before computing this step.
    pub at_step: u32,
    /// Number of initial attempts that crash.
    pub times: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSection {
    /// Random running simulations to kill.
    pub kill_sims: u32,
    /// Earliest study time for the first simulation kill.
    pub kill_sims_after_secs: f64,
    pub crash_sims: Vec<CrashSpec>,
    /// Kill the server once this many simulations are done.
    pub kill_server_after_done: Option<u64>,
}

impl StudyConfig {
    /// Desk-scale defaults for `n_sims` simulations.
    pub fn new(study_id: impl Into<String>, n_sims: u64) -> Self {
        StudyConfig {
            study_id: study_id.into(),
            n_sims,
            seed: 0,
            n_timesteps: default_timesteps(),
            fields: default_fields(),
            output_dir: default_output(),
            store_raw: false,
            simulation: DyeConfig::default(),
            statistics: StatisticsSection::default(),
            server: ServerSection::default(),
            launcher: LauncherSection::default(),
            faults: FaultSection::default(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: StudyConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("study config serializes")
    }

    pub fn quantile_orders(&self) -> Vec<f64> {
        self.statistics.quantiles.clone().unwrap_or_else(StatisticsConfig::percentiles)
    }

    pub fn statistics_config(&self) -> StatisticsConfig {
        StatisticsConfig {
            quantile_orders: self.quantile_orders(),
            thresholds: self.statistics.thresholds.clone(),
            gain: self.statistics.gain,
            schedule: self.statistics.schedule,
            declared_n: self.n_sims.max(2),
        }
    }

    pub fn n_cells(&self) -> u64 {
        self.simulation.grid.n_cells() as u64
    }

    pub fn layout(&self) -> StudyLayout {
        StudyLayout {
            study_id: self.study_id.clone(),
            n_cells: self.n_cells(),
            n_timesteps: self.n_timesteps,
            fields: self.fields.clone(),
            n_sims: self.n_sims,
            n_ranks: self.server.ranks,
            stats: self.statistics_config(),
        }
    }

    /// Server settings for a server working in `work_dir`. Heartbeats and
    /// restore are decided by whoever starts the server.
    pub fn server_config(&self, work_dir: impl Into<PathBuf>) -> ServerConfig {
        let mut s = ServerConfig::new(self.layout(), work_dir);
        s.checkpoint_period = (self.server.checkpoint_period_secs > 0.0)
            .then(|| Duration::from_secs_f64(self.server.checkpoint_period_secs));
        s.idle_timeout = Duration::from_secs_f64(self.server.idle_timeout_secs);
        s.record_log = self.server.record_log;
        s.queue_depth = self.server.queue_depth;
        s
    }

    /// Concurrency cap in force at study time `t`.
    pub fn cap_at(&self, t: Duration) -> usize {
        let secs = t.as_secs_f64();
        self.launcher
            .cap_schedule
            .iter()
            .filter(|c| c.after_secs <= secs)
            .max_by(|a, b| a.after_secs.total_cmp(&b.after_secs))
            .map_or(self.launcher.max_concurrent, |c| c.cap)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.n_sims == 0 {
            return bad("n_sims must be at least 1");
        }
        if self.fields != [DYE_FIELD] {
            return bad("the dye simulation produces exactly one field, \"dye\"");
        }
        if self.launcher.max_concurrent == 0 || self.launcher.cap_schedule.iter().any(|c| c.cap == 0) {
            return bad("concurrency caps must be positive");
        }
        if self.launcher.cap_schedule.iter().any(|c| !(c.after_secs >= 0.0)) {
            return bad("cap schedule times must be non-negative");
        }
        let positive = [
            self.server.idle_timeout_secs,
            self.server.heartbeat_period_secs,
            self.launcher.heartbeat_timeout_secs,
            self.launcher.heartbeat_suspect_secs,
            self.launcher.sim_wall_limit_secs,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("timeouts and periods must be positive");
        }
        if !(self.server.checkpoint_period_secs >= 0.0) {
            return bad("checkpoint period must be non-negative (0 disables periodic checkpoints)");
        }
        if self.launcher.heartbeat_suspect_secs > self.launcher.heartbeat_timeout_secs {
            return bad("heartbeat suspect time exceeds the failure timeout");
        }
        if self.faults.crash_sims.iter().any(|c| c.sim >= self.n_sims || c.at_step >= self.n_timesteps) {
            return bad("crash injection names an unknown simulation or step");
        }
        if self.store_raw && self.n_cells() * self.n_timesteps as u64 * self.n_sims > 1 << 28 {
            return bad("store_raw is limited to desk-scale studies (at most 2^28 values)");
        }
        self.simulation.build_flow().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.layout().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

//! TOML configuration for runs and sweeps.
//!
//! Unknown keys are hard errors, out-of-enum values report the valid choices,
//! and every field has a documented default, so an empty file is a valid
//! config. The fully resolved config is echoed into the output directory as
//! the reproducibility record.

use std::fmt;
use std::path::Path;

use invdyn_core::data::DataSource;
use invdyn_core::experiment::{
    cell_seed, ControllerKind, ExperimentConfig, FrictionLevel, GainSetting, NoiseLevel,
    StictionLevel, Tuning,
};
use serde::{Deserialize, Serialize};

/// Configuration loading/validation error.
#[derive(Debug)]
pub enum ConfigError {
    Io(std::path::PathBuf, std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(path, e) => write!(f, "cannot read {}: {e}", path.display()),
            ConfigError::Parse(msg) => write!(f, "config parse error: {msg}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevelCfg {
    Low,
    Medium,
    High,
    VeryHigh,
}

impl From<NoiseLevelCfg> for NoiseLevel {
    fn from(v: NoiseLevelCfg) -> Self {
        match v {
            NoiseLevelCfg::Low => NoiseLevel::Low,
            NoiseLevelCfg::Medium => NoiseLevel::Medium,
            NoiseLevelCfg::High => NoiseLevel::High,
            NoiseLevelCfg::VeryHigh => NoiseLevel::VeryHigh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoLevelCfg {
    Medium,
    High,
}

impl From<TwoLevelCfg> for FrictionLevel {
    fn from(v: TwoLevelCfg) -> Self {
        match v {
            TwoLevelCfg::Medium => FrictionLevel::Medium,
            TwoLevelCfg::High => FrictionLevel::High,
        }
    }
}

impl From<TwoLevelCfg> for StictionLevel {
    fn from(v: TwoLevelCfg) -> Self {
        match v {
            TwoLevelCfg::Medium => StictionLevel::Medium,
            TwoLevelCfg::High => StictionLevel::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerCfg {
    Pid,
    Adaptive,
}

impl From<ControllerCfg> for ControllerKind {
    fn from(v: ControllerCfg) -> Self {
        match v {
            ControllerCfg::Pid => ControllerKind::Pid,
            ControllerCfg::Adaptive => ControllerKind::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainCfg {
    Low,
    High,
}

impl From<GainCfg> for GainSetting {
    fn from(v: GainCfg) -> Self {
        match v {
            GainCfg::Low => GainSetting::Low,
            GainCfg::High => GainSetting::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCfg {
    Indirect,
    Direct,
    Joint,
}

impl From<SourceCfg> for DataSource {
    fn from(v: SourceCfg) -> Self {
        match v {
            SourceCfg::Indirect => DataSource::Indirect,
            SourceCfg::Direct => DataSource::Direct,
            SourceCfg::Joint => DataSource::Joint,
        }
    }
}

/// Numeric tuning knobs. Mirrors [`Tuning`]; every field defaults to the
/// shipped value, so configs only list what they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningFile {
    pub dt: f64,
    pub true_mass: f64,
    pub approx_mass: f64,
    pub q_init: Vec<f64>,
    pub q_goal: Vec<f64>,
    pub policy_kp: f64,
    pub policy_kd: f64,
    pub noise_low: f64,
    pub noise_medium: f64,
    pub noise_high: f64,
    pub noise_very_high: f64,
    pub viscous_medium: f64,
    pub viscous_high: f64,
    pub coulomb_medium: f64,
    pub coulomb_high: f64,
    pub coulomb_cell_pattern: Vec<f64>,
    pub break_medium: f64,
    pub break_high: f64,
    pub v_stick: f64,
    pub pid_kp: f64,
    pub pid_ki: f64,
    pub pid_kd: f64,
    pub pid_integral_limit: f64,
    pub adaptive_eta: f64,
    pub adaptive_offset_limit: f64,
    pub low_gain_scale: f64,
    pub learner_gain_scale: f64,
    pub filter_beta: f64,
    pub output_clamp: f64,
    pub hidden_layers: Vec<usize>,
    pub prelu_alpha_init: f64,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub accumulate_data: bool,
    pub converge_pos: f64,
    pub converge_vel: f64,
    pub abort_threshold: f64,
}

impl Default for TuningFile {
    fn default() -> Self {
        TuningFile::from_tuning(&Tuning::default())
    }
}

impl TuningFile {
    pub fn from_tuning(t: &Tuning) -> Self {
        TuningFile {
            dt: t.dt,
            true_mass: t.true_mass,
            approx_mass: t.approx_mass,
            q_init: t.q_init.clone(),
            q_goal: t.q_goal.clone(),
            policy_kp: t.policy_kp,
            policy_kd: t.policy_kd,
            noise_low: t.noise_low,
            noise_medium: t.noise_medium,
            noise_high: t.noise_high,
            noise_very_high: t.noise_very_high,
            viscous_medium: t.viscous_medium,
            viscous_high: t.viscous_high,
            coulomb_medium: t.coulomb_medium,
            coulomb_high: t.coulomb_high,
            coulomb_cell_pattern: t.coulomb_cell_pattern.clone(),
            break_medium: t.break_medium,
            break_high: t.break_high,
            v_stick: t.v_stick,
            pid_kp: t.pid_kp,
            pid_ki: t.pid_ki,
            pid_kd: t.pid_kd,
            pid_integral_limit: t.pid_integral_limit,
            adaptive_eta: t.adaptive_eta,
            adaptive_offset_limit: t.adaptive_offset_limit,
            low_gain_scale: t.low_gain_scale,
            learner_gain_scale: t.learner_gain_scale,
            filter_beta: t.filter_beta,
            output_clamp: t.output_clamp,
            hidden_layers: t.hidden_layers.clone(),
            prelu_alpha_init: t.prelu_alpha_init,
            learn_rate: t.learn_rate,
            batch_size: t.batch_size,
            accumulate_data: t.accumulate_data,
            converge_pos: t.converge_pos,
            converge_vel: t.converge_vel,
            abort_threshold: t.abort_threshold,
        }
    }

    pub fn to_tuning(&self) -> Result<Tuning, ConfigError> {
        if self.q_init.len() != self.q_goal.len() || self.q_init.is_empty() {
            return Err(ConfigError::Invalid(
                "q_init and q_goal must be non-empty and the same length".into(),
            ));
        }
        let cells = 1usize << self.q_init.len();
        if self.coulomb_cell_pattern.is_empty() || self.coulomb_cell_pattern.len() > cells {
            return Err(ConfigError::Invalid(format!(
                "coulomb_cell_pattern must have 1..={cells} entries"
            )));
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.iter().any(|w| *w == 0) {
            return Err(ConfigError::Invalid(
                "hidden_layers must be non-empty positive widths".into(),
            ));
        }
        if self.dt <= 0.0 || self.v_stick <= 0.0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid(
                "dt, v_stick and batch_size must be positive".into(),
            ));
        }
        Ok(Tuning {
            dt: self.dt,
            true_mass: self.true_mass,
            approx_mass: self.approx_mass,
            q_init: self.q_init.clone(),
            q_goal: self.q_goal.clone(),
            policy_kp: self.policy_kp,
            policy_kd: self.policy_kd,
            noise_low: self.noise_low,
            noise_medium: self.noise_medium,
            noise_high: self.noise_high,
            noise_very_high: self.noise_very_high,
            viscous_medium: self.viscous_medium,
            viscous_high: self.viscous_high,
            coulomb_medium: self.coulomb_medium,
            coulomb_high: self.coulomb_high,
            coulomb_cell_pattern: self.coulomb_cell_pattern.clone(),
            break_medium: self.break_medium,
            break_high: self.break_high,
            v_stick: self.v_stick,
            pid_kp: self.pid_kp,
            pid_ki: self.pid_ki,
            pid_kd: self.pid_kd,
            pid_integral_limit: self.pid_integral_limit,
            adaptive_eta: self.adaptive_eta,
            adaptive_offset_limit: self.adaptive_offset_limit,
            low_gain_scale: self.low_gain_scale,
            learner_gain_scale: self.learner_gain_scale,
            filter_beta: self.filter_beta,
            output_clamp: self.output_clamp,
            hidden_layers: self.hidden_layers.clone(),
            prelu_alpha_init: self.prelu_alpha_init,
            learn_rate: self.learn_rate,
            batch_size: self.batch_size,
            accumulate_data: self.accumulate_data,
            converge_pos: self.converge_pos,
            converge_vel: self.converge_vel,
            abort_threshold: self.abort_threshold,
        })
    }
}

/// Single-run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub noise_level: NoiseLevelCfg,
    pub friction_level: TwoLevelCfg,
    pub stiction_level: TwoLevelCfg,
    pub controller: ControllerCfg,
    pub gain_setting: GainCfg,
    pub data_source: SourceCfg,
    pub epochs: usize,
    pub n_iterations: usize,
    pub seed: u64,
    pub horizon: usize,
    pub tuning: TuningFile,
}

impl Default for RunFile {
    fn default() -> Self {
        RunFile {
            noise_level: NoiseLevelCfg::Low,
            friction_level: TwoLevelCfg::Medium,
            stiction_level: TwoLevelCfg::Medium,
            controller: ControllerCfg::Pid,
            gain_setting: GainCfg::Low,
            data_source: SourceCfg::Joint,
            epochs: 20,
            n_iterations: 20,
            seed: 0,
            horizon: 5000,
            tuning: TuningFile::default(),
        }
    }
}

impl RunFile {
    pub fn to_cell(&self) -> ExperimentConfig {
        ExperimentConfig {
            noise_level: self.noise_level.into(),
            friction_level: self.friction_level.into(),
            stiction_level: self.stiction_level.into(),
            controller: self.controller.into(),
            gain_setting: self.gain_setting.into(),
            data_source: self.data_source.into(),
            epochs: self.epochs,
            n_iterations: self.n_iterations,
            seed: self.seed,
            horizon: self.horizon,
        }
    }

    pub fn validate(&self) -> Result<(ExperimentConfig, Tuning), ConfigError> {
        let tuning = self.tuning.to_tuning()?;
        let cell = self.to_cell();
        cell.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((cell, tuning))
    }
}

/// Sweep grid configuration file: explicit axis lists, crossed in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepFile {
    pub base_seed: u64,
    pub repetitions: u64,
    pub noise_levels: Vec<NoiseLevelCfg>,
    pub friction_levels: Vec<TwoLevelCfg>,
    pub stiction_levels: Vec<TwoLevelCfg>,
    pub controllers: Vec<ControllerCfg>,
    pub gain_settings: Vec<GainCfg>,
    pub data_sources: Vec<SourceCfg>,
    pub epochs: Vec<usize>,
    pub n_iterations: usize,
    pub horizon: usize,
    pub tuning: TuningFile,
}

impl Default for SweepFile {
    fn default() -> Self {
        SweepFile {
            base_seed: 42,
            repetitions: 5,
            noise_levels: vec![NoiseLevelCfg::Low, NoiseLevelCfg::VeryHigh],
            friction_levels: vec![TwoLevelCfg::Medium],
            stiction_levels: vec![TwoLevelCfg::Medium],
            controllers: vec![ControllerCfg::Pid, ControllerCfg::Adaptive],
            gain_settings: vec![GainCfg::Low],
            data_sources: vec![SourceCfg::Indirect, SourceCfg::Direct, SourceCfg::Joint],
            epochs: vec![20],
            n_iterations: 20,
            horizon: 5000,
            tuning: TuningFile::default(),
        }
    }
}

impl SweepFile {
    /// Expand the grid. The master seed of each cell depends on the system
    /// condition, hyperparameters and repetition, never on the data source.
    pub fn grid(&self) -> Result<(Vec<ExperimentConfig>, Tuning), ConfigError> {
        let tuning = self.tuning.to_tuning()?;
        for (name, empty) in [
            ("noise_levels", self.noise_levels.is_empty()),
            ("friction_levels", self.friction_levels.is_empty()),
            ("stiction_levels", self.stiction_levels.is_empty()),
            ("controllers", self.controllers.is_empty()),
            ("gain_settings", self.gain_settings.is_empty()),
            ("data_sources", self.data_sources.is_empty()),
            ("epochs", self.epochs.is_empty()),
        ] {
            if empty {
                return Err(ConfigError::Invalid(format!("{name} must not be empty")));
            }
        }
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid("repetitions must be >= 1".into()));
        }
        let mut grid = Vec::new();
        for &noise in &self.noise_levels {
            for &friction in &self.friction_levels {
                for &stiction in &self.stiction_levels {
                    for &controller in &self.controllers {
                        for &gain in &self.gain_settings {
                            for &epochs in &self.epochs {
                                for rep in 0..self.repetitions {
                                    let seed = cell_seed(
                                        self.base_seed,
                                        noise.into(),
                                        friction.into(),
                                        stiction.into(),
                                        controller.into(),
                                        gain.into(),
                                        epochs,
                                        rep,
                                    );
                                    for &source in &self.data_sources {
                                        let cell = ExperimentConfig {
                                            noise_level: noise.into(),
                                            friction_level: friction.into(),
                                            stiction_level: stiction.into(),
                                            controller: controller.into(),
                                            gain_setting: gain.into(),
                                            data_source: source.into(),
                                            epochs,
                                            n_iterations: self.n_iterations,
                                            seed,
                                            horizon: self.horizon,
                                        };
                                        cell.validate().map_err(|e| {
                                            ConfigError::Invalid(e.to_string())
                                        })?;
                                        grid.push(cell);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((grid, tuning))
    }
}

/// Apply `--set key=value` overrides onto a TOML document before parsing.
/// Dotted keys address nested tables (`tuning.policy_kp=30`).
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String, ConfigError> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{entry}` is not KEY=VALUE")))?;
        // try the raw text as a TOML literal (number, bool, array); bare
        // words like `low` fall back to strings
        let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key v was just inserted"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut parts = key.split('.').peekable();
        let mut table = &mut doc;
        loop {
            let part = parts.next().expect("split yields at least one part");
            if parts.peek().is_none() {
                table.insert(part.to_string(), value);
                break;
            }
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| {
                    ConfigError::Invalid(format!("override `{key}` descends into a non-table"))
                })?;
        }
    }
    toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))
}

fn read_config_text(path: Option<&Path>) -> Result<String, ConfigError> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io(p.to_path_buf(), e)),
        None => Ok(String::new()),
    }
}

pub fn load_run_file(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<RunFile, ConfigError> {
    let text = apply_overrides(&read_config_text(path)?, overrides)?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn load_sweep_file(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<SweepFile, ConfigError> {
    let text = apply_overrides(&read_config_text(path)?, overrides)?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Serialize the fully resolved config for the reproducibility record.
pub fn echo_toml<T: Serialize>(value: &T) -> String {
    toml::to_string_pretty(value).expect("resolved config serializes")
}

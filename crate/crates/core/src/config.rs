//! Experiment configuration: one TOML document with a section per stage,
//! dotted command-line overrides and an output-directory environment
//! override.
//!
//! ```toml
//! output_dir = "runs"
//! seed = 3            # optional; replaces every section seed
//!
//! [task]
//! noise = 0.35
//!
//! [train]
//! mode = "SMILE"
//! iterations = 1500
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::TaskSpec;
use crate::diagnostics::{IlConfig, LabelSpace, Layer, Uniform};
use crate::loss::Mode;
use crate::model::Architecture;
use crate::trainer::{PretrainConfig, TrainConfig};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SMILE_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of each target class kept for training.
    pub sampling_rate: f64,
    pub subsample_seed: u64,
    /// Also write CSV copies of every split.
    pub write_csv: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sampling_rate: 0.3,
            subsample_seed: 0,
            write_csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

/// Interpolation-loss sampling shared by both layers, plus trajectory size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub label_space: LabelSpace,
    pub delta: Uniform,
    pub lambda: Uniform,
    pub n_pairs: usize,
    pub n_delta_draws: usize,
    pub n_lambda_draws: usize,
    pub denom_epsilon: f64,
    pub seed: u64,
    /// Image pairs traced through the feature extractor.
    pub trajectory_pairs: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        let il = IlConfig::default();
        DiagnosticsConfig {
            label_space: il.label_space,
            delta: il.delta,
            lambda: il.lambda,
            n_pairs: il.n_pairs,
            n_delta_draws: il.n_delta_draws,
            n_lambda_draws: il.n_lambda_draws,
            denom_epsilon: il.denom_epsilon,
            seed: il.seed,
            trajectory_pairs: 8,
        }
    }
}

impl DiagnosticsConfig {
    pub fn il_config(&self, layer: Layer) -> IlConfig {
        IlConfig {
            layer,
            label_space: self.label_space,
            delta: self.delta,
            lambda: self.lambda,
            n_pairs: self.n_pairs,
            n_delta_draws: self.n_delta_draws,
            n_lambda_draws: self.n_lambda_draws,
            denom_epsilon: self.denom_epsilon,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// When present, replaces the seed of every section.
    pub seed: Option<u64>,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub arch: Architecture,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("smile-out"),
            seed: None,
            task: TaskSpec::default(),
            data: DataConfig::default(),
            arch: Architecture::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and the output-directory environment variable, then
    /// validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?,
            None => String::new(),
        };
        let env_dir = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty());
        Self::from_parts(&text, overrides, env_dir.map(PathBuf::from))
    }

    pub fn from_parts(text: &str, overrides: &[String], output_dir: Option<PathBuf>) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: ExperimentConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(one_line(&e.to_string())))?;
        if let Some(dir) = output_dir {
            config.output_dir = dir;
        }
        if let Some(seed) = config.seed {
            config.task.seed = seed;
            config.data.subsample_seed = seed;
            config.pretrain.seed = seed;
            config.train.seed = seed;
            config.diagnostics.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        self.task.validate().map_err(|e| invalid("task", e))?;
        if !(self.data.sampling_rate > 0.0 && self.data.sampling_rate <= 1.0) {
            return Err(invalid("data.sampling_rate", "must lie in (0, 1]"));
        }
        self.arch.validate().map_err(|e| invalid("arch", e))?;
        let pairs = [
            ("arch.image_size", self.arch.image_size, self.task.image_size),
            ("arch.in_channels", self.arch.in_channels, self.task.channels),
            ("arch.source_classes", self.arch.source_classes, self.task.source_classes),
            ("arch.target_classes", self.arch.target_classes, self.task.target_classes),
        ];
        for (field, arch, task) in pairs {
            if arch != task {
                return Err(invalid(field, format!("{arch} disagrees with the task value {task}")));
            }
        }
        self.pretrain.validate().map_err(|e| section_error("pretrain", e))?;
        self.train.validate().map_err(|e| section_error("train", e))?;
        if self.ablate.modes.is_empty() {
            return Err(invalid("ablate.modes", "must not be empty"));
        }
        if self.ablate.seeds.len() < 2 {
            return Err(invalid("ablate.seeds", "needs at least two seeds"));
        }
        self.diagnostics
            .il_config(Layer::Label)
            .validate()
            .map_err(|e| invalid("diagnostics", e))?;
        if self.diagnostics.trajectory_pairs == 0 {
            return Err(invalid("diagnostics.trajectory_pairs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn section_error(section: &str, e: crate::trainer::TrainError) -> ConfigError {
    match e {
        crate::trainer::TrainError::InvalidConfig { field, reason } => invalid(&format!("{section}.{field}"), reason),
        other => invalid(section, other),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets `a.b.c = value`, creating intermediate tables. The value is read as
/// a TOML literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key.trim(), format!("`{part}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

//! Run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use crate::adversary::pipeline::EvalSettings;
use crate::baselines::{DpSettings, GridSpec, NoiseSpec};
use crate::controller::ControllerConfig;
use crate::error::{bail, Error, Result};
use crate::model::ArchDescriptor;
use crate::tensor::DType;
use crate::train::TrainOpts;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainBase,
    Search,
    Grid,
    DpBaseline,
    Attack,
    Report,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TrainBase => "train-base",
            Mode::Search => "search",
            Mode::Grid => "grid",
            Mode::DpBaseline => "dp-baseline",
            Mode::Attack => "attack",
            Mode::Report => "report",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parse(format!("unknown mode {:?}", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Zoo name or inline layer list.
    pub model: ArchDescriptor,
    pub dtype: DType,
    pub dataset: DatasetSpec,
    pub base_training: TrainOpts,
    pub eval: EvalSettings,
    pub controller: ControllerConfig,
    pub grid: GridSpec,
    pub noise: NoiseSpec,
    pub dp: DpSettings,
    /// Partitions evaluated by the noise baseline; empty means every unit boundary.
    pub dp_partitions: Vec<usize>,
    /// Strategy attacked by the `attack` command.
    pub strategy: Option<String>,
    /// Expected subcommand; a mismatch is a configuration error.
    pub mode: Option<Mode>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ArchDescriptor::Zoo("tiny-lenet".into()),
            dtype: DType::F32,
            dataset: DatasetSpec::default(),
            base_training: TrainOpts::default(),
            eval: EvalSettings::default(),
            controller: ControllerConfig::default(),
            grid: GridSpec::default(),
            noise: NoiseSpec::default(),
            dp: DpSettings::default(),
            dp_partitions: Vec::new(),
            strategy: None,
            mode: None,
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn model_name(&self) -> &str {
        match &self.model {
            ArchDescriptor::Zoo(n) => n,
            ArchDescriptor::Inline { name, .. } => name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                Config,
                "schema_version {} is not supported (expected {})",
                self.schema_version,
                SCHEMA_VERSION
            );
        }
        if self.seeds.is_empty() {
            bail!(Config, "at least one seed is required");
        }
        if self.threads == Some(0) {
            bail!(Config, "threads must be positive");
        }
        self.dataset.validate()?;
        self.base_training.validate()?;
        self.eval.knobs.validate()?;
        self.eval.schedule.validate()?;
        self.controller.validate()?;
        self.noise.validate()?;
        if !self.eval.attack.kind.supports(self.eval.privacy) {
            bail!(
                Config,
                "attack {:?} cannot measure privacy variant {}",
                self.eval.attack.kind,
                self.eval.privacy
            );
        }
        if !self.dp.attack.kind.supports(self.dp.privacy) {
            bail!(
                Config,
                "noise-baseline attack {:?} cannot measure {}",
                self.dp.attack.kind,
                self.dp.privacy
            );
        }
        if let Some(s) = &self.strategy {
            s.parse::<crate::model::Strategy>()?;
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {}", e)))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }

    /// Canonical pretty-printed document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_canonical() {
        let c = RunConfig::default();
        let text = c.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "colour": "red"}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_schema_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"schema_version": 9}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"model": "tiny-mlp", "seeds": [1, 2]}"#).unwrap();
        assert_eq!(c.model_name(), "tiny-mlp");
        assert_eq!(c.controller.episodes, 200);
    }

    #[test]
    fn mode_names() {
        for m in [
            Mode::TrainBase,
            Mode::Search,
            Mode::Grid,
            Mode::DpBaseline,
            Mode::Attack,
            Mode::Report,
        ] {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
    }
}

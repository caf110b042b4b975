//! Run configuration: one TOML file with defaults for every field, plus
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::distill::DistillConfig;
use crate::pipeline::data::DatasetSpec;
use crate::sampler::SamplerConfig;
use crate::schedules::ScheduleConfig;
use crate::stage1::{RunContext, Stage1Config};
use crate::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Validation images scored by `eval`; 0 means the whole split.
    pub images: usize,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub timed_batches: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            images: 0,
            batch_size: 8,
            warmup_batches: 1,
            timed_batches: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stage1: Stage1Config,
    pub distill: DistillConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            stage1: Stage1Config::default(),
            distill: DistillConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        let schedule = self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.stage1.validate().map_err(|e| Error::Config(format!("stage1: {e}")))?;
        self.distill.validate().map_err(|e| Error::Config(format!("distill: {e}")))?;
        self.sampler.validate().map_err(|e| Error::Config(format!("sampler: {e}")))?;
        self.dataset.validate()?;
        let (h, _) = schedule.final_resolution();
        if h != self.model.image_size || h != self.dataset.resolution {
            return Err(Error::Config(format!(
                "schedule ends at {h}, model.image_size is {}, dataset.resolution is {}",
                self.model.image_size, self.dataset.resolution
            )));
        }
        if schedule.base_resolution() % self.model.patch_size != 0 {
            return Err(Error::Config(format!(
                "base resolution {} is not a multiple of patch size {}",
                schedule.base_resolution(),
                self.model.patch_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into the output directory, creating it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn run_context(&self) -> Result<RunContext> {
        Ok(RunContext {
            out_dir: Some(self.out_dir.clone()),
            run_config: serde_json::to_value(self)?,
            seed: self.seed,
        })
    }
}

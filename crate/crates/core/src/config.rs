//! Run configuration: one TOML file with `[source]`, `[filters]`, `[binding]`
//! and `[uploader]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collector::DAY_US;
use crate::filters::{FilterConfig, FilterError};
use crate::provenance::{BindingMode, ProvenanceOptions};
use crate::uploader::{TargetFormat, DEFAULT_BATCH_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Directory holding `events-*.ndjson` files.
    pub log_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Catalog snapshot replayed DDL is folded into.
    pub catalog: PathBuf,
    pub staleness_horizon_us: i64,
    pub retain_plan_payloads: bool,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            log_dir: PathBuf::from("logs"),
            checkpoint: PathBuf::from("state/checkpoint.json"),
            catalog: PathBuf::from("state/catalog.json"),
            staleness_horizon_us: DAY_US,
            retain_plan_payloads: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BindingConfig {
    pub mode: BindingMode,
    pub include_control_columns: bool,
    pub max_expansion_depth: usize,
    pub emit_column_entities: bool,
}

impl Default for BindingConfig {
    fn default() -> Self {
        let p = ProvenanceOptions::default();
        BindingConfig {
            mode: p.mode,
            include_control_columns: p.include_control_columns,
            max_expansion_depth: p.max_expansion_depth,
            emit_column_entities: false,
        }
    }
}

impl BindingConfig {
    pub fn provenance_options(&self) -> ProvenanceOptions {
        ProvenanceOptions {
            mode: self.mode,
            include_control_columns: self.include_control_columns,
            max_expansion_depth: self.max_expansion_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UploaderConfig {
    /// Directory path or `http(s)://` endpoint; empty disables uploading.
    pub sink: String,
    pub batch_size: usize,
    pub target_format: TargetFormat,
    pub retry_base_ms: u64,
    pub max_attempts: u32,
    pub checkpoint: PathBuf,
    /// Where to write the run's graph as one JSON document; empty disables it.
    pub graph_out: PathBuf,
    pub report: PathBuf,
}

impl Default for UploaderConfig {
    fn default() -> Self {
        UploaderConfig {
            sink: String::new(),
            batch_size: DEFAULT_BATCH_SIZE,
            target_format: TargetFormat::AtlasJson,
            retry_base_ms: 1000,
            max_attempts: 5,
            checkpoint: PathBuf::from("state/upload.json"),
            graph_out: PathBuf::from("out/graph.json"),
            report: PathBuf::from("state/last_report.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub source: SourceConfig,
    pub filters: FilterConfig,
    pub binding: BindingConfig,
    pub uploader: UploaderConfig,
}

impl Default for Config {
    /// Production filter profile.
    fn default() -> Self {
        Config {
            source: SourceConfig::default(),
            filters: FilterConfig::production(),
            binding: BindingConfig::default(),
            uploader: UploaderConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

impl Config {
    /// Fields missing from `text` take their values from [`Config::default`].
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let given: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut doc: toml::Table = toml::from_str(&Config::default().to_toml()).expect("own output parses");
        merge(&mut doc, given);
        let c: Config = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable { path: path.display().to_string(), reason: e.to_string() })?;
        let mut c = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            c.rebase(base);
        }
        Ok(c)
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.source.log_dir);
        fix(&mut self.source.checkpoint);
        fix(&mut self.source.catalog);
        fix(&mut self.uploader.checkpoint);
        fix(&mut self.uploader.graph_out);
        fix(&mut self.uploader.report);
        if !self.uploader.sink.is_empty() && !self.uploader.sink.contains("://") && Path::new(&self.uploader.sink).is_relative() {
            self.uploader.sink = base.join(&self.uploader.sink).display().to_string();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.filters.validate()?;
        if self.uploader.batch_size == 0 {
            return Err(ConfigError::Invalid("uploader.batch_size must be at least 1".into()));
        }
        if self.uploader.max_attempts == 0 {
            return Err(ConfigError::Invalid("uploader.max_attempts must be at least 1".into()));
        }
        if self.source.staleness_horizon_us <= 0 {
            return Err(ConfigError::Invalid("source.staleness_horizon_us must be positive".into()));
        }
        Ok(())
    }

    /// Applies `KEY=value` overrides such as `filters.sp_runs_admitted=16`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| ConfigError::Invalid(format!("override key {key:?} needs a section")))?;
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown section {section:?}")))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(field.to_string(), parsed);
        *self = Config::from_toml(&toml::to_string(&doc).expect("table serializes"))?;
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

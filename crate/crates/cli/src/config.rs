use std::path::{Path, PathBuf};

use amoe_core::feature_io::{LayerSelection, SyntheticSpec};
use amoe_core::scoring_eval::AggregateConfig;
use amoe_core::trainer::{GradcheckConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// File name of the resolved-config snapshot written by every run.
pub const SNAPSHOT: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub layers: LayerSelection,
}

/// Sweep axes. An empty axis keeps the base value from `[train]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Experts per group.
    pub n_experts: Vec<usize>,
    pub top_k: Vec<usize>,
    pub lambda_esb: Vec<f64>,
    pub lambda_eir: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub train: TrainConfig,
    pub aggregate: AggregateConfig,
    pub gradcheck: GradcheckConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Defaults, then the optional file, then `key.path=value` overrides.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            table = text
                .parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {}", path.display(), one_line(&e.to_string()))))?;
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Value::Table(table)
            .try_into::<RunConfig>()
            .map_err(|e| CliError::Config(one_line(&e.to_string())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

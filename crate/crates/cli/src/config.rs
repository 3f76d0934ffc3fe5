//! Experiment configuration files (TOML) and versioned JSON reports.

use anyhow::{bail, Context, Result};
use neuropt_core::ensemble::TransferConfig;
use neuropt_core::objectives::ObjectiveSpec;
use neuropt_core::search::SearchConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;

/// One file fully determines a run. Each entry of `seeds` is one repeat; it
/// replaces `search.seed` for that repeat and also seeds `cmd_train` and
/// `cmd_transfer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub objective: ObjectiveSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Must equal `seeds.len()` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn new(objective: ObjectiveSpec) -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA,
            objective,
            seeds: default_seeds(),
            repeats: None,
            out: None,
            search: SearchConfig::default(),
            transfer: TransferConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            bail!("schema: unsupported version {} (expected {CONFIG_SCHEMA})", self.schema);
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bail!("seeds: duplicate seed");
        }
        if let Some(r) = self.repeats {
            if r != self.seeds.len() {
                bail!("repeats: {r} does not match the {} listed seeds", self.seeds.len());
            }
        }
        self.search.validate().context("search")?;
        self.search.train.validate().context("search.train")?;
        self.transfer.train.validate().context("transfer.train")?;
        self.objective.build().context("objective")?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Parses and validates; syntax and type errors carry line and field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Search settings of the repeat with seed `seed`.
    pub fn search_for(&self, seed: u64) -> SearchConfig {
        SearchConfig {
            seed,
            ..self.search.clone()
        }
    }
}

/// JSON envelope of every command's report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report<T> {
    pub schema: u32,
    pub command: String,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, result: T) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            command: command.to_string(),
            result,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses a report of `command`, rejecting other schema versions.
pub fn parse_report<T: DeserializeOwned>(text: &str, command: &str) -> Result<T> {
    let head: serde_json::Value = serde_json::from_str(text)?;
    match head.get("schema").and_then(|v| v.as_u64()) {
        Some(v) if v == REPORT_SCHEMA as u64 => {}
        Some(v) => bail!("unsupported report schema version {v} (expected {REPORT_SCHEMA})"),
        None => bail!("report has no schema version"),
    }
    let r: Report<T> = serde_json::from_value(head)?;
    if r.command != command {
        bail!("expected a {command} report, found {}", r.command);
    }
    Ok(r.result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use neuropt_core::search::StrategyKind;

    fn sample() -> ExperimentConfig {
        let mut c = ExperimentConfig::new("F5:10:3".parse().unwrap());
        c.seeds = vec![4, 9, 2];
        c.repeats = Some(3);
        c.out = Some("runs/x".into());
        c.search.strategy = StrategyKind::Mac;
        c.search.budget = 12_345;
        c.search.train.adam.learning_rate = 0.1 + 0.2;
        c.search.penalty.edge_excess = 1.0 / 3.0;
        c.transfer.cutoff = 77;
        c
    }

    #[test]
    fn config_round_trips_losslessly() {
        let c = sample();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("schema = 1\nobjective = \"sphere:3\"\n").unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.search, SearchConfig::default());
    }

    #[test]
    fn unknown_field_is_reported_with_its_name_and_line() {
        let err = ExperimentConfig::from_toml("schema = 1\nobjective = \"sphere:3\"\n[search]\nbugdet = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bugdet") && err.contains("line 4"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "schema = 2\nobjective = \"sphere:3\"\n",
            "schema = 1\nobjective = \"cube:3\"\n",
            "schema = 1\nobjective = \"sphere:3\"\nseeds = []\n",
            "schema = 1\nobjective = \"sphere:3\"\nseeds = [1, 1]\n",
            "schema = 1\nobjective = \"sphere:3\"\nseeds = [1, 2]\nrepeats = 3\n",
            "schema = 1\nobjective = \"sphere:3\"\n[search]\nbudget = \"lots\"\n",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn reports_reject_other_versions_and_commands() {
        let json = Report::new("protein", 1.5).to_json().unwrap();
        assert_eq!(parse_report::<f64>(&json, "protein").unwrap(), 1.5);
        assert!(parse_report::<f64>(&json, "train").is_err());
        let bumped = json.replace("\"schema\": 1", "\"schema\": 2");
        assert!(parse_report::<f64>(&bumped, "protein").unwrap_err().to_string().contains("version 2"));
    }
}

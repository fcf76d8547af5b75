//! Run configuration: one JSON document plus `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scenario_core::ingest::{ColumnSchema, DEFAULT_INTERVAL_MINUTES, DEFAULT_MAX_GAP};
use scenario_core::scenario::LibraryConfig;
use scenario_core::synth::SynthConfig;
use scenario_core::{DayWindow, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sensor CSV; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub columns: ColumnSchema,
    pub interval_minutes: u32,
    pub max_gap: usize,
    /// Optional `date,profile` ground truth, reported against clusters.
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            columns: ColumnSchema::default(),
            interval_minutes: DEFAULT_INTERVAL_MINUTES,
            max_gap: DEFAULT_MAX_GAP,
            labels: None,
        }
    }
}

/// Restricts which valid days enter clustering, training and evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DateFilter {
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    /// Calendar months (1-12) to keep; empty keeps all.
    pub months: Vec<u32>,
}

impl DateFilter {
    pub fn keeps(&self, date: NaiveDate) -> bool {
        self.start.is_none_or(|s| date >= s)
            && self.end.is_none_or(|e| date <= e)
            && (self.months.is_empty() || self.months.contains(&date.month()))
    }

    pub fn apply(&self, windows: Vec<DayWindow>) -> Vec<DayWindow> {
        windows.into_iter().filter(|w| self.keeps(w.date)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Forecast day; defaults to the last valid day of the data.
    pub date: Option<NaiveDate>,
    /// Refit the scenario's constants on recent days before forecasting.
    pub refit: bool,
    /// Number of days before the forecast day used for the refit.
    pub refit_days: usize,
    /// Library to load; defaults to `library.json` in the output directory.
    pub library: Option<PathBuf>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            date: None,
            refit: true,
            refit_days: 3,
            library: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub mode: Mode,
    pub filter: DateFilter,
    /// Chronological fraction of valid days used for training.
    pub train_ratio: f64,
    pub library: LibraryConfig,
    pub synth: SynthConfig,
    pub predict: PredictConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            mode: Mode::Cooling,
            filter: DateFilter::default(),
            train_ratio: 0.8,
            library: LibraryConfig::default(),
            synth: SynthConfig::default(),
            predict: PredictConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, and resolves relative paths against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let (mut value, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let value: Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (value, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (serde_json::to_value(RunConfig::default())?, PathBuf::new()),
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut config: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        for p in [
            &mut config.data.path,
            &mut config.data.labels,
            &mut config.predict.library,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            bail!(
                "train_ratio must lie strictly between 0 and 1, got {}",
                self.train_ratio
            );
        }
        let l = &self.library;
        if !(2 <= l.k_min && l.k_min <= l.k_max) {
            bail!("k range {}..={} must satisfy 2 <= k_min <= k_max", l.k_min, l.k_max);
        }
        if let (Some(s), Some(e)) = (self.filter.start, self.filter.end) {
            if s > e {
                bail!("filter start {s} is after end {e}");
            }
        }
        if let Some(m) = self.filter.months.iter().find(|m| !(1..=12).contains(*m)) {
            bail!("filter month {m} is not in 1..=12");
        }
        l.gp.validate()?;
        Ok(())
    }

    /// Uses one seed for k-means, evolution and the synthetic generator.
    pub fn set_seed(&mut self, seed: u64) {
        self.library.seed = seed;
        self.library.gp.seed = seed;
        self.synth.seed = seed;
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .context("no input data: set data.path in the config or with --set data.path=FILE")
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not of the form key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override `{key}`: `{}` is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let config = RunConfig::load(
            None,
            &[
                "library.gp.population=50".into(),
                "mode=heating".into(),
                "data.path=x.csv".into(),
                "filter.months=[7,8,9]".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.library.gp.population, 50);
        assert_eq!(config.mode, Mode::Heating);
        assert_eq!(config.data.path, Some(PathBuf::from("x.csv")));
        assert!(config.filter.keeps(NaiveDate::from_ymd_opt(2022, 8, 3).unwrap()));
        assert!(!config.filter.keeps(NaiveDate::from_ymd_opt(2022, 10, 3).unwrap()));
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        assert!(RunConfig::load(None, &["data.pth=x".into()]).is_err());
        assert!(RunConfig::load(None, &["train_ratio=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["library.k_min=1".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"data": {"path": "d.csv"}}"#).unwrap();
        let config = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config.data.path, Some(dir.path().join("d.csv")));
    }
}

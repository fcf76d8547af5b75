//! Per-scenario model training, online assignment and refit, and
//! one-day-ahead forecasting.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    assign_nearest, cluster_quality, kmeans_fit, select_k, ClusterModel, ClusterQuality, KMeansConfig,
};
use crate::error::{Error, Result};
use crate::features::{
    build_feature_matrix, extract_window, normalize_features, FeatureMatrix, NormalizationParams, SpectralConfig,
};
use crate::ingest::{check_contiguous, contiguous_runs, Channel, DayWindow, GridTable};
use crate::metrics::{compute_metrics, time_block, MetricReport};
use crate::sr::{
    build_training_set, refit_constants, run_evolution, Expr, GpConfig, LagRef, SeriesCursor, TrainingSet,
    DEFAULT_LAG_BUDGET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Cooling,
    Heating,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Cooling => "cooling",
            Mode::Heating => "heating",
        })
    }
}

/// Knobs for [`train_library`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    pub spectral: SpectralConfig,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansConfig,
    pub gp: GpConfig,
    pub lag_budget: usize,
    pub seed: u64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            spectral: SpectralConfig::default(),
            k_min: 2,
            k_max: 8,
            kmeans: KMeansConfig::default(),
            gp: GpConfig::default(),
            lag_budget: DEFAULT_LAG_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModel {
    pub cluster_id: usize,
    pub expression: Expr,
    pub training_mse: f64,
    pub trained_on: Vec<NaiveDate>,
    /// Set when the cluster had no usable training rows and the model is
    /// the persistence fallback.
    #[serde(default)]
    pub untrainable: bool,
}

/// The deployable artifact: clustering, normalization and one model per
/// cluster. Immutable; updates return a new library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLibrary {
    pub mode: Mode,
    pub interval_minutes: u32,
    pub lag_budget: usize,
    pub spectral: SpectralConfig,
    pub feature_names: Vec<String>,
    pub normalization: NormalizationParams,
    pub cluster: ClusterModel,
    pub cluster_dates: Vec<NaiveDate>,
    pub quality: Option<ClusterQuality>,
    pub silhouette_curve: Vec<(usize, f64)>,
    pub models: Vec<ScenarioModel>,
}

/// Fallback model for clusters without training data.
pub fn persistence_model() -> Expr {
    Expr::var(LagRef::indoor(1))
}

impl ScenarioLibrary {
    pub fn k(&self) -> usize {
        self.cluster.k
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn model(&self, cluster: usize) -> Result<&ScenarioModel> {
        self.models
            .get(cluster)
            .ok_or_else(|| Error::InvalidArgument(format!("cluster {cluster} out of range 0..{}", self.models.len())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let library: ScenarioLibrary = serde_json::from_reader(BufReader::new(file))?;
        library.validate()?;
        Ok(library)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.len() != self.cluster.k {
            return Err(Error::InvalidArgument(format!(
                "library has {} models for {} clusters",
                self.models.len(),
                self.cluster.k
            )));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.cluster_id != i {
                return Err(Error::InvalidArgument(format!(
                    "model {i} is labelled cluster {}",
                    m.cluster_id
                )));
            }
            m.expression.validate(usize::MAX, self.lag_budget)?;
        }
        if self.normalization.dim() != self.cluster.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.cluster.dim(),
                got: self.normalization.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTraining {
    pub cluster_id: usize,
    pub days: usize,
    pub rows: usize,
    pub expression: String,
    pub training_mse: f64,
    pub untrainable: bool,
    /// Wall-clock seconds.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub clusters: Vec<ClusterTraining>,
    pub clustering_seconds: f64,
    pub total_seconds: f64,
}

/// Outcome of the day-clustering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DayClustering {
    pub features: FeatureMatrix,
    pub normalized: Vec<Vec<f64>>,
    pub normalization: NormalizationParams,
    pub model: ClusterModel,
    /// `(k, silhouette)` for every k tried; empty when k fell back to 1.
    pub curve: Vec<(usize, f64)>,
    /// `None` when k = 1.
    pub quality: Option<ClusterQuality>,
}

/// Features, normalization, silhouette-based k selection and the final
/// fit. `k_max` is clamped to one less than the number of days; when every
/// day has the same normalized features a single scenario is returned.
pub fn cluster_days(windows: &[DayWindow], config: &LibraryConfig) -> Result<DayClustering> {
    if windows.len() < config.k_min + 1 {
        return Err(Error::TooFew {
            what: "valid day windows",
            needed: config.k_min + 1,
            got: windows.len(),
        });
    }
    let features = build_feature_matrix(windows, &config.spectral)?;
    let (normalized, normalization) = normalize_features(&features.values())?;
    let degenerate = normalized.iter().all(|r| r.iter().all(|v| *v == 0.0));
    let k_max = config.k_max.min(windows.len() - 1);
    let (model, curve) = if degenerate || k_max < config.k_min {
        warn!("day features do not separate; falling back to a single scenario");
        (kmeans_fit(&normalized, 1, config.seed, &config.kmeans)?, Vec::new())
    } else {
        let selection = select_k(&normalized, config.k_min, k_max, config.seed, &config.kmeans)?;
        info!(
            "selected k = {} from silhouette curve {:?}",
            selection.best_k, selection.curve
        );
        (
            kmeans_fit(&normalized, selection.best_k, config.seed, &config.kmeans)?,
            selection.curve,
        )
    };
    let quality = if model.k >= 2 {
        Some(cluster_quality(&normalized, &model.assignments)?)
    } else {
        None
    };
    Ok(DayClustering {
        features,
        normalized,
        normalization,
        model,
        curve,
        quality,
    })
}

/// Clusters the days, then evolves and refits one expression per cluster.
///
/// A cluster's training rows are the steps of its own days; lag history
/// may reach into neighbouring days of any cluster.
pub fn train_library(
    windows: &[DayWindow],
    mode: Mode,
    config: &LibraryConfig,
) -> Result<(ScenarioLibrary, TrainingReport)> {
    if windows.len() < config.k_min + 1 {
        return Err(Error::TooFew {
            what: "valid day windows",
            needed: config.k_min + 1,
            got: windows.len(),
        });
    }
    let interval_minutes = day_interval(&windows[0])?;
    let (total_result, total_seconds) = time_block(|| -> Result<_> {
        let (clustering, clustering_seconds) = time_block(|| cluster_days(windows, config));
        let DayClustering {
            features,
            normalization,
            model,
            curve,
            quality,
            ..
        } = clustering?;
        let gp = GpConfig {
            lag_budget: config.lag_budget,
            ..config.gp.clone()
        };
        let mut models = Vec::with_capacity(model.k);
        let mut report = Vec::with_capacity(model.k);
        for c in 0..model.k {
            let dates: BTreeSet<NaiveDate> = windows
                .iter()
                .zip(&model.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(w, _)| w.date)
                .collect();
            let (trained, seconds) = time_block(|| -> Result<_> {
                let set = TrainingSet::for_dates(windows, &dates, config.lag_budget)?;
                if set.is_empty() {
                    warn!("cluster {c} has no training rows; using persistence model");
                    let expr = persistence_model();
                    return Ok((expr, f64::NAN, 0, true));
                }
                let cluster_gp = GpConfig {
                    seed: gp.seed.wrapping_add(c as u64),
                    ..gp.clone()
                };
                let evolved = run_evolution(&set, &cluster_gp)?;
                let expr = refit_constants(&evolved.best.fold_constants(), &set);
                let mse = set.mse(&expr);
                Ok((expr, mse, set.len(), false))
            });
            let (expression, training_mse, rows, untrainable) = trained?;
            info!(
                "cluster {c}: {} days, {rows} rows, mse {training_mse:.6}, {expression}",
                dates.len()
            );
            report.push(ClusterTraining {
                cluster_id: c,
                days: dates.len(),
                rows,
                expression: expression.to_string(),
                training_mse,
                untrainable,
                seconds,
            });
            models.push(ScenarioModel {
                cluster_id: c,
                expression,
                training_mse: if training_mse.is_finite() { training_mse } else { 0.0 },
                trained_on: dates.into_iter().collect(),
                untrainable,
            });
        }
        let library = ScenarioLibrary {
            mode,
            interval_minutes,
            lag_budget: config.lag_budget,
            spectral: config.spectral.clone(),
            feature_names: features.names,
            normalization,
            cluster_dates: windows.iter().map(|w| w.date).collect(),
            quality,
            silhouette_curve: curve,
            cluster: model,
            models,
        };
        Ok((library, report, clustering_seconds))
    });
    let (library, clusters, clustering_seconds) = total_result?;
    Ok((
        library,
        TrainingReport {
            clusters,
            clustering_seconds,
            total_seconds,
        },
    ))
}

fn day_interval(window: &DayWindow) -> Result<u32> {
    match window.records.as_slice() {
        [a, b, ..] => {
            let minutes = (b.timestamp - a.timestamp).num_minutes();
            if minutes <= 0 || 1440 % minutes != 0 {
                return Err(Error::InvalidArgument(format!("irregular day window {}", window.date)));
            }
            Ok(minutes as u32)
        }
        _ => Err(Error::InvalidArgument(format!(
            "day window {} is too short",
            window.date
        ))),
    }
}

/// Scenario for a day window, via the stored feature pipeline.
pub fn assign_online_day(library: &ScenarioLibrary, window: &DayWindow) -> Result<usize> {
    let features = extract_window(window, &library.spectral)?;
    let normalized = library.normalization.apply(&features.values)?;
    assign_nearest(&library.cluster, &normalized)
}

/// Refits one cluster's constants on recent contiguous days. The input
/// library is left untouched.
pub fn refit_online(library: &ScenarioLibrary, cluster: usize, recent: &[DayWindow]) -> Result<ScenarioLibrary> {
    let current = library.model(cluster)?;
    let data = build_training_set(recent, library.lag_budget)?;
    let expression = refit_constants(&current.expression, &data);
    let mut updated = library.clone();
    updated.models[cluster] = ScenarioModel {
        training_mse: data.mse(&expression),
        expression,
        ..current.clone()
    };
    Ok(updated)
}

/// Known inputs for the forecast day. `NaN` marks a missing step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousDay {
    pub date: NaiveDate,
    pub outdoor_temp: Vec<f64>,
    pub hvac_power: Vec<f64>,
    /// Recorded indoor temperature, for scoring only.
    pub observed_indoor: Option<Vec<f64>>,
}

impl ExogenousDay {
    pub fn from_window(window: &DayWindow) -> Self {
        ExogenousDay {
            date: window.date,
            outdoor_temp: window.channel(Channel::OutdoorTemp),
            hvac_power: window.channel(Channel::HvacPower),
            observed_indoor: Some(window.channel(Channel::IndoorTemp)),
        }
    }

    /// Reads the day from a grid; slots that are absent or outside the
    /// grid become `NaN`.
    pub fn from_grid(grid: &GridTable, date: NaiveDate) -> Self {
        let steps = grid.steps_per_day();
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight");
        let interval = i64::from(grid.interval_minutes);
        let slot = |step: usize| {
            let minutes = (midnight - grid.start).num_minutes() + interval * step as i64;
            if minutes < 0 || minutes % interval != 0 {
                return None;
            }
            grid.slots.get((minutes / interval) as usize).copied().flatten()
        };
        let column = |c: Channel| {
            (0..steps)
                .map(|i| slot(i).map_or(f64::NAN, |r| r.value(c)))
                .collect::<Vec<_>>()
        };
        let indoor = column(Channel::IndoorTemp);
        ExogenousDay {
            date,
            outdoor_temp: column(Channel::OutdoorTemp),
            hvac_power: column(Channel::HvacPower),
            observed_indoor: indoor.iter().all(|v| v.is_finite()).then_some(indoor),
        }
    }

    fn check(&self, steps: usize, interval_minutes: u32) -> Result<()> {
        let midnight = self.date.and_hms_opt(0, 0, 0).expect("midnight");
        let missing = |step: usize| Error::MissingExogenous {
            date: self.date,
            step,
            time: (midnight + Duration::minutes(i64::from(interval_minutes) * step as i64))
                .format("%H:%M")
                .to_string(),
        };
        for series in [&self.outdoor_temp, &self.hvac_power] {
            if let Some(step) = series.iter().position(|v| !v.is_finite()) {
                return Err(missing(step));
            }
            if series.len() < steps {
                return Err(missing(series.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub timestamp: NaiveDateTime,
    pub observed: Option<f64>,
    pub predicted: f64,
    pub abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub date: NaiveDate,
    pub cluster: usize,
    pub entries: Vec<ForecastEntry>,
}

impl ForecastResult {
    pub fn predictions(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.predicted).collect()
    }

    /// `timestamp,observed,predicted,abs_error`; unknown cells are empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["timestamp", "observed", "predicted", "abs_error"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for e in &self.entries {
            csv.write_record([
                e.timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(),
                opt(e.observed),
                e.predicted.to_string(),
                opt(e.abs_error),
            ])?;
        }
        csv.flush().map_err(|e| Error::io("<forecast csv>", e))?;
        Ok(())
    }
}

fn history_series(history: &[DayWindow]) -> [Vec<f64>; 3] {
    let mut series = [Vec::new(), Vec::new(), Vec::new()];
    for w in history {
        for r in &w.records {
            for c in Channel::ALL {
                series[c.index()].push(r.value(c));
            }
        }
    }
    series
}

fn check_history(library: &ScenarioLibrary, history: &[DayWindow], date: NaiveDate) -> Result<()> {
    let Some(last) = history.last() else {
        return Err(Error::InsufficientHistory {
            needed: library.lag_budget,
            got: 0,
        });
    };
    check_contiguous(history)?;
    if last.date.succ_opt() != Some(date) {
        return Err(Error::NotContiguous {
            before: last.date,
            after: date,
        });
    }
    let steps: usize = history.iter().map(DayWindow::len).sum();
    if steps < library.lag_budget {
        return Err(Error::InsufficientHistory {
            needed: library.lag_budget,
            got: steps,
        });
    }
    Ok(())
}

/// Rolls the scenario model over the day after `history`.
///
/// The scenario comes from the last history day. Indoor lags that land on
/// the forecast day read earlier predictions; outdoor temperature and power
/// always come from `exogenous`.
pub fn forecast_one_day(
    library: &ScenarioLibrary,
    history: &[DayWindow],
    exogenous: &ExogenousDay,
) -> Result<ForecastResult> {
    check_history(library, history, exogenous.date)?;
    let steps = library.steps_per_day();
    exogenous.check(steps, library.interval_minutes)?;
    let cluster = assign_online_day(library, history.last().expect("checked non-empty"))?;
    let expr = &library.model(cluster)?.expression;

    let mut series = history_series(history);
    let offset = series[0].len();
    series[Channel::OutdoorTemp.index()].extend_from_slice(&exogenous.outdoor_temp[..steps]);
    series[Channel::HvacPower.index()].extend_from_slice(&exogenous.hvac_power[..steps]);
    let midnight = exogenous.date.and_hms_opt(0, 0, 0).expect("midnight");
    let mut entries = Vec::with_capacity(steps);
    for step in 0..steps {
        let position = offset + step;
        let cursor = SeriesCursor {
            series: [&series[0], &series[1], &series[2]],
            position,
        };
        let predicted = expr.evaluate(&cursor)?;
        series[Channel::IndoorTemp.index()].push(predicted);
        let observed = exogenous.observed_indoor.as_ref().and_then(|o| o.get(step).copied());
        entries.push(ForecastEntry {
            timestamp: midnight + Duration::minutes(i64::from(library.interval_minutes) * step as i64),
            observed,
            predicted,
            abs_error: observed.map(|o| (o - predicted).abs()),
        });
    }
    Ok(ForecastResult {
        date: exogenous.date,
        cluster,
        entries,
    })
}

/// One-step-ahead predictions for `day`, every lag read from observations.
pub fn one_step_day(library: &ScenarioLibrary, history: &[DayWindow], day: &DayWindow) -> Result<ForecastResult> {
    check_history(library, history, day.date)?;
    let cluster = assign_online_day(library, history.last().expect("checked non-empty"))?;
    let expr = &library.model(cluster)?.expression;
    let mut series = history_series(history);
    let offset = series[0].len();
    for r in &day.records {
        for c in Channel::ALL {
            series[c.index()].push(r.value(c));
        }
    }
    let entries = day
        .records
        .iter()
        .enumerate()
        .map(|(step, r)| {
            let cursor = SeriesCursor {
                series: [&series[0], &series[1], &series[2]],
                position: offset + step,
            };
            let predicted = expr.evaluate(&cursor)?;
            Ok(ForecastEntry {
                timestamp: r.timestamp,
                observed: Some(r.indoor_temp),
                predicted,
                abs_error: Some((r.indoor_temp - predicted).abs()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastResult {
        date: day.date,
        cluster,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayScore {
    pub date: NaiveDate,
    pub cluster: usize,
    pub one_step_rmse: f64,
    pub rollout_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: Mode,
    pub one_step: MetricReport,
    pub rollout: MetricReport,
    pub days: Vec<DayScore>,
    /// Test days without enough contiguous history.
    pub skipped: Vec<NaiveDate>,
}

/// Scores the library on `test_dates`, drawing history from `windows`
/// (all days, chronological). Each test day is predicted one step ahead
/// from observed lags and, separately, by full-day rollout.
pub fn evaluate_on_test(
    library: &ScenarioLibrary,
    windows: &[DayWindow],
    test_dates: &[NaiveDate],
) -> Result<Evaluation> {
    let wanted: BTreeSet<NaiveDate> = test_dates.iter().copied().collect();
    let mut observed = Vec::new();
    let mut one_step = Vec::new();
    let mut rollout = Vec::new();
    let mut days = Vec::new();
    let mut skipped = Vec::new();
    for run in contiguous_runs(windows) {
        for (i, day) in run.iter().enumerate() {
            if !wanted.contains(&day.date) {
                continue;
            }
            let history = &run[..i];
            let steps: usize = history.iter().map(DayWindow::len).sum();
            if history.is_empty() || steps < library.lag_budget {
                skipped.push(day.date);
                continue;
            }
            let step_result = one_step_day(library, history, day)?;
            let roll_result = forecast_one_day(library, history, &ExogenousDay::from_window(day))?;
            let obs = day.channel(Channel::IndoorTemp);
            let a = step_result.predictions();
            let b = roll_result.predictions();
            days.push(DayScore {
                date: day.date,
                cluster: step_result.cluster,
                one_step_rmse: compute_metrics(&obs, &a)?.rmse,
                rollout_rmse: compute_metrics(&obs, &b)?.rmse,
            });
            observed.extend(obs);
            one_step.extend(a);
            rollout.extend(b);
        }
    }
    let missing: Vec<NaiveDate> = wanted
        .iter()
        .filter(|d| !days.iter().any(|s| s.date == **d) && !skipped.contains(d))
        .copied()
        .collect();
    skipped.extend(missing);
    if days.is_empty() {
        return Err(Error::TooFew {
            what: "evaluable test days",
            needed: 1,
            got: 0,
        });
    }
    Ok(Evaluation {
        mode: library.mode,
        one_step: compute_metrics(&observed, &one_step)?,
        rollout: compute_metrics(&observed, &rollout)?,
        days,
        skipped,
    })
}

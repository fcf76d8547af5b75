//! One function per subcommand. Every artifact lands under the output
//! directory; wall-clock timings go only to `timing.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::{Datelike, NaiveDate, Timelike};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use scenario_core::cluster::{contingency_table, purity};
use scenario_core::ingest::{
    parse_sensor_csv, regularize, split_train_test, write_drop_report, write_sensor_csv, GridTable,
};
use scenario_core::metrics::{time_block, write_metrics_csv};
use scenario_core::scenario::{
    assign_online_day, cluster_days, evaluate_on_test, forecast_one_day, refit_online, train_library, ExogenousDay,
};
use scenario_core::synth::generate;
use scenario_core::{Channel, DayWindow, ScenarioLibrary};

use crate::config::RunConfig;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CLUSTERING: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;
pub const EXIT_PREDICTION: u8 = 5;

/// An error tagged with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{source:#}")]
pub struct Failure {
    pub code: u8,
    source: anyhow::Error,
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

pub trait Stage<T> {
    fn stage(self, code: u8) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, code: u8) -> Outcome<T> {
        self.map_err(|e| Failure { code, source: e.into() })
    }
}

/// Command-line options that refine the configured prediction.
#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub library: Option<PathBuf>,
    pub date: Option<NaiveDate>,
    pub no_refit: bool,
}

struct Data {
    grid: GridTable,
    windows: Vec<DayWindow>,
    drops: Vec<scenario_core::ingest::DropReport>,
}

fn load_data(config: &RunConfig) -> Outcome<Data> {
    let path = config.data_path().stage(EXIT_INPUT)?;
    let table = parse_sensor_csv(path, &config.data.columns).stage(EXIT_INPUT)?;
    let (grid, windows, drops) =
        regularize(&table, config.data.interval_minutes, config.data.max_gap).stage(EXIT_INPUT)?;
    info!(
        "{}: {} records, {} valid days, {} dropped",
        path.display(),
        table.len(),
        windows.len(),
        drops.len()
    );
    Ok(Data { grid, windows, drops })
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .stage(EXIT_INPUT)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).stage(EXIT_INPUT)?;
    w.write_all(b"\n").and_then(|_| w.flush()).stage(EXIT_INPUT)
}

/// Merges `entry` under `key` in the timing sidecar.
fn record_timing(out: &Path, key: &str, entry: Value) -> Outcome {
    let path = out.join("timing.json");
    let mut root: BTreeMap<String, Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    root.insert(key.to_string(), entry);
    write_json(&path, &root)
}

fn read_timing(out: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(out.join("timing.json")).ok()?).ok()
}

fn read_labels(path: &Path) -> Outcome<BTreeMap<NaiveDate, usize>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading labels {}", path.display()))
        .stage(EXIT_INPUT)?;
    let mut labels = BTreeMap::new();
    for row in reader.deserialize::<(NaiveDate, usize)>() {
        let (date, label) = row
            .with_context(|| format!("parsing labels {}", path.display()))
            .stage(EXIT_INPUT)?;
        labels.insert(date, label);
    }
    Ok(labels)
}

pub fn ingest(config: &RunConfig, out: &Path) -> Outcome {
    let data = load_data(config)?;
    let records: Vec<_> = data.windows.iter().flat_map(|w| w.records.iter().copied()).collect();
    write_sensor_csv(create(&out.join("normalized.csv"))?, &records, &config.data.columns).stage(EXIT_INPUT)?;

    let mut drops = create(&out.join("drop_report.txt"))?;
    write_drop_report(&mut drops, &data.drops)
        .and_then(|_| drops.flush())
        .stage(EXIT_INPUT)?;

    // Hourly mean indoor temperature per day, one row per date.
    let mut heat = csv::Writer::from_writer(create(&out.join("heatmap.csv"))?);
    let mut header = vec!["date".to_string(), "weekday".to_string()];
    header.extend((0..24).map(|h| format!("h{h:02}")));
    heat.write_record(&header).stage(EXIT_INPUT)?;
    for w in &data.windows {
        let mut sums = [(0.0, 0usize); 24];
        for r in &w.records {
            let slot = &mut sums[r.timestamp.hour() as usize];
            slot.0 += r.indoor_temp;
            slot.1 += 1;
        }
        let mut row = vec![w.date.to_string(), w.date.weekday().to_string()];
        row.extend(sums.iter().map(|(s, n)| {
            if *n == 0 {
                String::new()
            } else {
                (s / *n as f64).to_string()
            }
        }));
        heat.write_record(&row).stage(EXIT_INPUT)?;
    }
    heat.flush().stage(EXIT_INPUT)?;
    info!(
        "ingest: {} days kept, {} dropped, {} grid gaps after filling",
        data.windows.len(),
        data.drops.len(),
        data.grid.gap_count()
    );
    Ok(())
}

pub fn cluster(config: &RunConfig, out: &Path) -> Outcome {
    let data = load_data(config)?;
    let windows = config.filter.apply(data.windows);
    let result = cluster_days(&windows, &config.library).stage(EXIT_CLUSTERING)?;
    let dates: Vec<NaiveDate> = windows.iter().map(|w| w.date).collect();

    result
        .features
        .write_csv(create(&out.join("features.csv"))?)
        .stage(EXIT_CLUSTERING)?;
    let mut curve = csv::Writer::from_writer(create(&out.join("silhouette_curve.csv"))?);
    curve.write_record(["k", "silhouette"]).stage(EXIT_CLUSTERING)?;
    for (k, s) in &result.curve {
        curve
            .write_record([k.to_string(), s.to_string()])
            .stage(EXIT_CLUSTERING)?;
    }
    curve.flush().stage(EXIT_CLUSTERING)?;

    let labels = config.data.labels.as_deref().map(read_labels).transpose()?;
    let mut assign = csv::Writer::from_writer(create(&out.join("assignments.csv"))?);
    if labels.is_some() {
        assign
            .write_record(["date", "cluster", "label"])
            .stage(EXIT_CLUSTERING)?;
    } else {
        assign.write_record(["date", "cluster"]).stage(EXIT_CLUSTERING)?;
    }
    for (date, c) in dates.iter().zip(&result.model.assignments) {
        let mut row = vec![date.to_string(), c.to_string()];
        if let Some(l) = &labels {
            row.push(l.get(date).map_or_else(String::new, ToString::to_string));
        }
        assign.write_record(&row).stage(EXIT_CLUSTERING)?;
    }
    assign.flush().stage(EXIT_CLUSTERING)?;

    let mut report = json!({
        "days": dates.len(),
        "k": result.model.k,
        "k_range": [config.library.k_min, config.library.k_max],
        "seed": config.library.seed,
        "inertia": result.model.inertia,
        "cluster_sizes": result.model.cluster_sizes(),
        "quality": result.quality,
        "silhouette_curve": result.curve,
        "feature_names": result.features.names,
    });
    if let Some(labels) = &labels {
        let (truth, found): (Vec<usize>, Vec<usize>) = dates
            .iter()
            .zip(&result.model.assignments)
            .filter_map(|(d, &c)| labels.get(d).map(|&l| (l, c)))
            .unzip();
        report["purity"] = json!(purity(&truth, &found));
        report["contingency"] = json!(contingency_table(&truth, &found));
    }
    write_json(&out.join("cluster_report.json"), &report)?;
    info!("cluster: k = {} over {} days", result.model.k, dates.len());
    Ok(())
}

fn split<'a>(config: &RunConfig, windows: &'a [DayWindow]) -> Outcome<(&'a [DayWindow], &'a [DayWindow])> {
    split_train_test(windows, config.train_ratio).stage(EXIT_INPUT)
}

pub fn train(config: &RunConfig, out: &Path) -> Outcome {
    let data = load_data(config)?;
    let windows = config.filter.apply(data.windows);
    let (train_days, _) = split(config, &windows)?;
    let (library, report) = train_library(train_days, config.mode, &config.library).map_err(|e| {
        let code = match e {
            scenario_core::Error::TooFew {
                what: "valid day windows",
                ..
            } => EXIT_CLUSTERING,
            _ => EXIT_TRAINING,
        };
        Failure { code, source: e.into() }
    })?;
    if library.models.iter().all(|m| m.untrainable) {
        return Err(anyhow!("no cluster had training data")).stage(EXIT_TRAINING);
    }
    library.save(&out.join("library.json")).stage(EXIT_TRAINING)?;

    let clusters: Vec<Value> = report
        .clusters
        .iter()
        .zip(&library.models)
        .map(|(c, m)| {
            json!({
                "cluster_id": c.cluster_id,
                "days": c.days,
                "rows": c.rows,
                "expression": c.expression,
                "complexity": m.expression.complexity(),
                "training_mse": m.training_mse,
                "untrainable": c.untrainable,
                "trained_on": m.trained_on,
            })
        })
        .collect();
    write_json(
        &out.join("training_log.json"),
        &json!({
            "mode": library.mode,
            "k": library.k(),
            "train_days": train_days.len(),
            "seed": config.library.gp.seed,
            "clusters": clusters,
        }),
    )?;
    record_timing(
        out,
        "train",
        json!({
            "clustering_seconds": report.clustering_seconds,
            "total_seconds": report.total_seconds,
            "cluster_seconds": report.clusters.iter().map(|c| c.seconds).collect::<Vec<_>>(),
        }),
    )?;
    for c in &report.clusters {
        info!(
            "cluster {}: {} (mse {:.6}, {:.1} s)",
            c.cluster_id, c.expression, c.training_mse, c.seconds
        );
    }
    Ok(())
}

fn library_path(config: &RunConfig, out: &Path, arg: Option<&Path>) -> PathBuf {
    arg.map(Path::to_path_buf)
        .or_else(|| config.predict.library.clone())
        .unwrap_or_else(|| out.join("library.json"))
}

fn load_library(path: &Path) -> Outcome<ScenarioLibrary> {
    ScenarioLibrary::load(path)
        .with_context(|| format!("loading library {}", path.display()))
        .stage(EXIT_INPUT)
}

pub fn evaluate(config: &RunConfig, out: &Path, library: Option<&Path>) -> Outcome {
    let library = load_library(&library_path(config, out, library))?;
    let data = load_data(config)?;
    let windows = config.filter.apply(data.windows);
    let (_, test_days) = split(config, &windows)?;
    let test_dates: Vec<NaiveDate> = test_days.iter().map(|w| w.date).collect();
    let (evaluation, seconds) = time_block(|| evaluate_on_test(&library, &windows, &test_dates));
    let evaluation = evaluation.stage(EXIT_PREDICTION)?;

    write_json(&out.join("metrics.json"), &evaluation)?;
    write_metrics_csv(
        create(&out.join("metrics.csv"))?,
        &[
            ("sr_one_step".to_string(), evaluation.one_step.clone()),
            ("sr_rollout".to_string(), evaluation.rollout.clone()),
        ],
    )
    .stage(EXIT_PREDICTION)?;
    let training_seconds = read_timing(out).and_then(|t| t["train"]["total_seconds"].as_f64());
    record_timing(
        out,
        "evaluate",
        json!({ "seconds": seconds, "training_time_seconds": training_seconds }),
    )?;
    info!(
        "evaluate: {} test days, one-step R2 {:.4} RMSE {:.4}, rollout R2 {:.4} RMSE {:.4}",
        evaluation.days.len(),
        evaluation.one_step.r2,
        evaluation.one_step.rmse,
        evaluation.rollout.r2,
        evaluation.rollout.rmse
    );
    if !evaluation.skipped.is_empty() {
        warn!("skipped test days without enough history: {:?}", evaluation.skipped);
    }
    Ok(())
}

pub fn predict(config: &RunConfig, out: &Path, args: &PredictArgs) -> Outcome {
    let mut library = load_library(&library_path(config, out, args.library.as_deref()))?;
    let data = load_data(config)?;
    let date = match args.date.or(config.predict.date) {
        Some(d) => d,
        None => data
            .windows
            .last()
            .map(|w| w.date)
            .context("no valid day to forecast")
            .stage(EXIT_PREDICTION)?,
    };
    // The contiguous run of valid days ending the day before the target.
    let before: Vec<&DayWindow> = data.windows.iter().filter(|w| w.date < date).collect();
    let mut start = before.len();
    let mut expected = date.pred_opt();
    while start > 0 && Some(before[start - 1].date) == expected {
        start -= 1;
        expected = before[start].date.pred_opt();
    }
    let history: Vec<DayWindow> = before[start..].iter().map(|w| (*w).clone()).collect();
    if history.is_empty() {
        return Err(anyhow!("no valid day immediately before {date} to forecast from")).stage(EXIT_PREDICTION);
    }

    let cluster = assign_online_day(&library, history.last().expect("non-empty")).stage(EXIT_PREDICTION)?;
    if config.predict.refit && !args.no_refit {
        let recent = &history[history.len().saturating_sub(config.predict.refit_days)..];
        match refit_online(&library, cluster, recent) {
            Ok(updated) => {
                info!(
                    "refit cluster {cluster}: {} -> {}",
                    library.models[cluster].expression, updated.models[cluster].expression
                );
                library = updated;
            }
            Err(e) => warn!("refit skipped: {e}"),
        }
    } else {
        info!("refit disabled; constants of cluster {cluster} untouched");
    }

    let exogenous = ExogenousDay::from_grid(&data.grid, date);
    let forecast = forecast_one_day(&library, &history, &exogenous).stage(EXIT_PREDICTION)?;
    let name = format!("forecast_{date}.csv");
    forecast.write_csv(create(&out.join(&name))?).stage(EXIT_PREDICTION)?;
    write_json(
        &out.join(format!("forecast_{date}.json")),
        &json!({
            "date": date,
            "cluster": forecast.cluster,
            "expression": library.models[forecast.cluster].expression,
            "refit": config.predict.refit && !args.no_refit,
            "history_days": history.len(),
        }),
    )?;
    info!(
        "predict: {name} from cluster {} ({} steps)",
        forecast.cluster,
        forecast.entries.len()
    );
    Ok(())
}

pub fn synth(config: &RunConfig, out: &Path) -> Outcome {
    let data = generate(&config.synth).stage(EXIT_INPUT)?;
    write_sensor_csv(
        create(&out.join("synthetic.csv"))?,
        &data.records(),
        &config.data.columns,
    )
    .stage(EXIT_INPUT)?;
    let mut labels = create(&out.join("labels.csv"))?;
    data.write_labels(&mut labels).stage(EXIT_INPUT)?;
    labels.flush().stage(EXIT_INPUT)?;
    let channel_means: Vec<String> = Channel::ALL
        .iter()
        .map(|c| {
            let all: Vec<f64> = data.windows.iter().flat_map(|w| w.channel(*c)).collect();
            format!("{} {:.2}", c.name(), all.iter().sum::<f64>() / all.len() as f64)
        })
        .collect();
    info!(
        "synth: {} days from {} profiles ({})",
        data.windows.len(),
        config.synth.profiles,
        channel_means.join(", ")
    );
    Ok(())
}

/// ingest, cluster, train and evaluate in sequence.
pub fn pipeline(config: &RunConfig, out: &Path) -> Outcome {
    ingest(config, out)?;
    cluster(config, out)?;
    train(config, out)?;
    evaluate(config, out, None)
}

//! Forecast accuracy metrics and wall-clock timing.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations with `|obs|` at or below this are excluded from MAPE.
pub const MAPE_ZERO_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r2: f64,
    /// Degrees Celsius.
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every observation is near zero.
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub mse: f64,
    pub n_points: usize,
    /// Seconds; filled in from training metadata when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub training_time: Option<f64>,
}

/// Scores predictions against observations.
///
/// R² is `1 - SS_res / SS_tot` and may be negative. When the observations
/// are constant (`SS_tot = 0`) it is 1 for a perfect fit and 0 otherwise.
pub fn compute_metrics(observed: &[f64], predicted: &[f64]) -> Result<MetricReport> {
    if observed.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    if observed.is_empty() {
        return Err(Error::TooFew {
            what: "points to score",
            needed: 1,
            got: 0,
        });
    }
    for values in [observed, predicted] {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: values[index],
            });
        }
    }

    let n = observed.len() as f64;
    let mean_obs = observed.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut abs_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_count = 0usize;
    for (&o, &p) in observed.iter().zip(predicted) {
        let err = o - p;
        ss_res += err * err;
        ss_tot += (o - mean_obs) * (o - mean_obs);
        abs_sum += err.abs();
        if o.abs() > MAPE_ZERO_THRESHOLD {
            pct_sum += err.abs() / o.abs();
            pct_count += 1;
        }
    }
    let mse = ss_res / n;
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(MetricReport {
        r2,
        rmse: mse.sqrt(),
        mae: abs_sum / n,
        mape: (pct_count > 0).then(|| 100.0 * pct_sum / pct_count as f64),
        mape_skipped: observed.len() - pct_count,
        mse,
        n_points: observed.len(),
        training_time: None,
    })
}

/// Writes labelled reports as a table with one row per label.
pub fn write_metrics_csv<W: Write>(writer: W, reports: &[(String, MetricReport)]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["model", "r2", "rmse", "mae", "mape", "mse", "n_points", "mape_skipped"])?;
    for (label, r) in reports {
        csv.write_record([
            label.clone(),
            r.r2.to_string(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.mape.map_or_else(String::new, |m| m.to_string()),
            r.mse.to_string(),
            r.n_points.to_string(),
            r.mape_skipped.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

/// Runs `f` and returns its result with the elapsed wall time in seconds.
pub fn time_block<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Accumulates labelled phase timings; shareable across threads.
#[derive(Debug, Default)]
pub struct Timings {
    entries: Mutex<Vec<(String, f64)>>,
}

impl Timings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn time<T>(&self, label: &str, f: impl FnOnce() -> T) -> T {
        let (out, secs) = time_block(f);
        self.record(label, secs);
        out
    }

    pub fn record(&self, label: &str, secs: f64) {
        self.entries
            .lock()
            .expect("timing lock poisoned")
            .push((label.to_string(), secs));
    }

    /// Sum of all entries with `label`.
    pub fn total(&self, label: &str) -> f64 {
        self.entries
            .lock()
            .expect("timing lock poisoned")
            .iter()
            .filter(|(l, _)| l == label)
            .map(|(_, s)| s)
            .sum()
    }

    pub fn entries(&self) -> Vec<(String, f64)> {
        self.entries.lock().expect("timing lock poisoned").clone()
    }
}

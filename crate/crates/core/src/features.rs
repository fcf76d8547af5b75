//! Statistical and spectral day descriptors used as k-means input.
//!
//! Per configured channel the feature layout is:
//!
//! | block       | names                                               |
//! |-------------|-----------------------------------------------------|
//! | statistical | `max min mean median variance std`                  |
//! | spectral    | `amplitude phase_offset`, then `real_h imag_h phase_h` for `h = 1..=harmonics` |
//!
//! giving `8 + 3 * harmonics` values per channel. Spectral terms come from
//! the forward DFT (kernel `exp(-i 2 pi j h / W)`) of the mean-removed
//! channel. `amplitude` is `2/W` times the largest non-DC bin magnitude.
//! `phase_offset` is the phase of the strongest retained harmonic `d >= 2`
//! relative to the fundamental, `phase_d - d * phase_1` wrapped to
//! `(-pi, pi]`; it is 0 when only one harmonic is retained.

use std::f64::consts::PI;
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Channel, DayWindow};

pub const DEFAULT_HARMONICS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    /// Non-DC DFT bins retained per channel.
    pub harmonics: usize,
    pub channels: Vec<Channel>,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            harmonics: DEFAULT_HARMONICS,
            channels: vec![Channel::IndoorTemp, Channel::HvacPower],
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        if self.harmonics == 0 || 2 * self.harmonics > window_len {
            return Err(Error::InvalidArgument(format!(
                "harmonics must lie in 1..={} for windows of {window_len} steps, got {}",
                window_len / 2,
                self.harmonics
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("no feature channels configured".into()));
        }
        Ok(())
    }

    pub fn features_per_channel(&self) -> usize {
        STAT_NAMES.len() + 2 + 3 * self.harmonics
    }

    /// Column names in layout order, e.g. `indoor_temp.mean`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.channels.len() * self.features_per_channel());
        for channel in &self.channels {
            let c = channel.name();
            names.extend(STAT_NAMES.iter().map(|s| format!("{c}.{s}")));
            names.push(format!("{c}.amplitude"));
            names.push(format!("{c}.phase_offset"));
            for h in 1..=self.harmonics {
                names.push(format!("{c}.real_{h}"));
                names.push(format!("{c}.imag_{h}"));
                names.push(format!("{c}.phase_{h}"));
            }
        }
        names
    }
}

const STAT_NAMES: [&str; 6] = ["max", "min", "mean", "median", "variance", "std"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Statistics {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    /// Population variance.
    pub variance: f64,
    pub std: f64,
}

impl Statistics {
    pub fn to_array(self) -> [f64; 6] {
        [self.max, self.min, self.mean, self.median, self.variance, self.std]
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub fn extract_statistical(channel: &[f64]) -> Result<Statistics> {
    if channel.len() < 2 {
        return Err(Error::TooFew {
            what: "samples for statistics",
            needed: 2,
            got: channel.len(),
        });
    }
    check_finite(channel)?;
    let n = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / n;
    let variance = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = channel.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Ok(Statistics {
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        mean,
        median,
        variance,
        std: variance.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub real: f64,
    pub imag: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub amplitude: f64,
    pub phase_offset: f64,
    pub harmonics: Vec<Harmonic>,
}

impl Spectrum {
    fn push_values(&self, out: &mut Vec<f64>) {
        out.push(self.amplitude);
        out.push(self.phase_offset);
        for h in &self.harmonics {
            out.extend([h.real, h.imag, h.phase]);
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(angle: f64) -> f64 {
    let wrapped = angle - 2.0 * PI * (angle / (2.0 * PI)).round();
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

/// Forward DFT of the mean-removed channel.
pub fn mean_removed_dft(channel: &[f64]) -> Vec<Complex<f64>> {
    let mean = channel.iter().sum::<f64>() / channel.len() as f64;
    let mut buffer: Vec<Complex<f64>> = channel.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buffer.len()).process(&mut buffer);
    buffer
}

pub fn extract_spectral(channel: &[f64], harmonics: usize) -> Result<Spectrum> {
    let w = channel.len();
    if harmonics == 0 || w < 2 * harmonics {
        return Err(Error::InvalidArgument(format!(
            "{harmonics} harmonics need a window of at least {} steps, got {w}",
            2 * harmonics.max(1)
        )));
    }
    check_finite(channel)?;
    let bins = mean_removed_dft(channel);
    // Round-off left after mean removal of a flat series must not produce
    // arbitrary phases.
    let scale = channel.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-10 * scale * w as f64;
    let clean = |c: Complex<f64>| if c.norm() <= floor { Complex::new(0.0, 0.0) } else { c };

    let largest = bins[1..=w / 2].iter().map(|c| clean(*c).norm()).fold(0.0, f64::max);
    let retained: Vec<Harmonic> = (1..=harmonics)
        .map(|h| {
            let c = clean(bins[h]);
            Harmonic {
                real: c.re,
                imag: c.im,
                phase: c.im.atan2(c.re),
            }
        })
        .collect();
    let phase_offset = (2..=harmonics)
        .map(|h| (h, clean(bins[h]).norm()))
        .filter(|&(_, m)| m > 0.0)
        .fold(None, |best: Option<(usize, f64)>, (h, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((h, m)),
        })
        .map_or(0.0, |(d, _)| {
            wrap_phase(retained[d - 1].phase - d as f64 * retained[0].phase)
        });
    Ok(Spectrum {
        amplitude: 2.0 / w as f64 * largest,
        phase_offset,
        harmonics: retained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub source_date: NaiveDate,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<FeatureVector>,
}

impl FeatureMatrix {
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.source_date).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        csv.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.source_date.to_string()];
            record.extend(row.values.iter().map(f64::to_string));
            csv.write_record(&record)?;
        }
        csv.flush().map_err(|e| Error::io("<features csv>", e))?;
        Ok(())
    }
}

pub fn extract_window(window: &DayWindow, config: &SpectralConfig) -> Result<FeatureVector> {
    config.validate(window.len())?;
    let mut values = Vec::with_capacity(config.channels.len() * config.features_per_channel());
    for &channel in &config.channels {
        let series = window.channel(channel);
        values.extend(extract_statistical(&series)?.to_array());
        extract_spectral(&series, config.harmonics)?.push_values(&mut values);
    }
    Ok(FeatureVector {
        source_date: window.date,
        values,
    })
}

/// One row per window in input order.
pub fn build_feature_matrix(windows: &[DayWindow], config: &SpectralConfig) -> Result<FeatureMatrix> {
    if windows.is_empty() {
        return Err(Error::TooFew {
            what: "day windows for features",
            needed: 1,
            got: 0,
        });
    }
    let rows = windows
        .par_iter()
        .map(|w| extract_window(w, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        names: config.feature_names(),
        rows,
    })
}

/// Per-column z-score parameters. A zero `std` marks a constant column,
/// which maps to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: values.len(),
            });
        }
        Ok(values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
            .collect())
    }
}

pub fn normalize_features(matrix: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, NormalizationParams)> {
    if matrix.len() < 2 {
        return Err(Error::TooFew {
            what: "rows to normalize",
            needed: 2,
            got: matrix.len(),
        });
    }
    let dim = matrix[0].len();
    if let Some(row) = matrix.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: row.len(),
        });
    }
    let n = matrix.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for j in 0..dim {
        let m = matrix.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = matrix.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        let s = var.sqrt();
        mean[j] = m;
        // Relative floor treats round-off spread around a constant as constant.
        std[j] = if s <= 1e-12 * m.abs().max(1.0) { 0.0 } else { s };
    }
    let params = NormalizationParams { mean, std };
    let normalized = matrix.iter().map(|r| params.apply(r)).collect::<Result<Vec<_>>>()?;
    Ok((normalized, params))
}

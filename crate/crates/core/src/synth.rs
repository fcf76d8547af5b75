//! Synthetic building data with known operating scenarios.
//!
//! Each day follows one of several HVAC profiles (on/off schedule and
//! setpoint). Indoor temperature evolves by a first-order recurrence
//!
//! ```text
//! Tin[i] = Tin[i-1] + coupling * (Tout[i-1] - Tin[i-1]) -/+ power_gain * P[i-1] + noise
//! ```
//!
//! with a proportional controller producing `P` during on-hours (cooling
//! subtracts heat, heating adds it). Outdoor temperature is a daily
//! sinusoid with a random per-day offset and per-step noise.

use std::f64::consts::PI;
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DayWindow, SensorRecord};
use crate::scenario::Mode;

pub const MAX_PROFILES: usize = 8;

const CONTROLLER_GAIN: f64 = 1500.0;
const MAX_POWER: f64 = 4000.0;
/// (start hour, duration in hours, cooling setpoint) for profiles 1..
const SCHEDULES: [(u32, u32, f64); MAX_PROFILES - 1] = [
    (8, 12, 24.0),
    (9, 9, 26.0),
    (7, 5, 22.0),
    (10, 10, 25.0),
    (6, 4, 23.0),
    (11, 6, 27.0),
    (12, 7, 21.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub profiles: usize,
    pub days: usize,
    pub seed: u64,
    /// Standard deviation (°C) of the indoor process noise and outdoor
    /// measurement noise; the per-day outdoor offset uses ten times this.
    pub noise: f64,
    pub mode: Mode,
    pub start_date: NaiveDate,
    pub interval_minutes: u32,
    /// Fraction of the indoor/outdoor difference closed per step.
    pub coupling: f64,
    /// °C per watt per step.
    pub power_gain: f64,
    /// Carry the indoor state across midnight instead of restarting each
    /// day from its profile's periodic state.
    pub carry_state: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            profiles: 4,
            days: 28,
            seed: 7,
            noise: 0.05,
            mode: Mode::Cooling,
            start_date: NaiveDate::from_ymd_opt(2022, 7, 1).expect("valid date"),
            interval_minutes: 5,
            coupling: 0.05,
            power_gain: 1e-4,
            carry_state: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Profile {
    /// Active step range within the day.
    on: Option<(usize, usize)>,
    setpoint: f64,
}

fn profile(index: usize, mode: Mode, steps_per_hour: usize) -> Profile {
    if index == 0 {
        return Profile {
            on: None,
            setpoint: 0.0,
        };
    }
    let (start, hours, cooling_sp) = SCHEDULES[index - 1];
    let setpoint = match mode {
        Mode::Cooling => cooling_sp,
        Mode::Heating => cooling_sp - 4.0,
    };
    let from = start as usize * steps_per_hour;
    Profile {
        on: Some((from, from + hours as usize * steps_per_hour)),
        setpoint,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub windows: Vec<DayWindow>,
    /// Profile index per day.
    pub labels: Vec<usize>,
}

impl SynthDataset {
    pub fn records(&self) -> Vec<SensorRecord> {
        self.windows.iter().flat_map(|w| w.records.iter().copied()).collect()
    }

    pub fn write_labels<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["date", "profile"])?;
        for (w, l) in self.windows.iter().zip(&self.labels) {
            csv.write_record([w.date.to_string(), l.to_string()])?;
        }
        csv.flush().map_err(|e| Error::io("<labels csv>", e))?;
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Simulator<'a> {
    config: &'a SynthConfig,
    steps: usize,
}

impl Simulator<'_> {
    fn outdoor_base(&self, step: usize) -> f64 {
        let hour = step as f64 * 24.0 / self.steps as f64;
        let mean = match self.config.mode {
            Mode::Cooling => 30.0,
            Mode::Heating => 6.0,
        };
        mean + 4.0 * (2.0 * PI * (hour - 15.0) / 24.0).cos()
    }

    fn power(&self, profile: &Profile, step: usize, indoor: f64) -> f64 {
        match profile.on {
            Some((from, to)) if (from..to).contains(&step) => {
                let error = match self.config.mode {
                    Mode::Cooling => indoor - profile.setpoint,
                    Mode::Heating => profile.setpoint - indoor,
                };
                (CONTROLLER_GAIN * error).clamp(0.0, MAX_POWER)
            }
            _ => 0.0,
        }
    }

    fn next_indoor(&self, indoor: f64, outdoor: f64, power: f64) -> f64 {
        let sign = match self.config.mode {
            Mode::Cooling => -1.0,
            Mode::Heating => 1.0,
        };
        indoor + self.config.coupling * (outdoor - indoor) + sign * self.config.power_gain * power
    }

    /// Simulates one day; returns per-step (indoor, outdoor, power) and the
    /// indoor value one step past the end.
    fn day(
        &self,
        profile: &Profile,
        start_indoor: f64,
        outdoor_offset: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<(f64, f64, f64)>, f64) {
        let mut rng = rng;
        let noise = self.config.noise;
        let mut out = Vec::with_capacity(self.steps);
        let mut indoor = start_indoor;
        for step in 0..self.steps {
            let mut outdoor = self.outdoor_base(step) + outdoor_offset;
            if let Some(r) = rng.as_deref_mut() {
                outdoor += noise * gaussian(r);
            }
            let power = self.power(profile, step, indoor);
            out.push((indoor, outdoor, power));
            indoor = self.next_indoor(indoor, outdoor, power);
            if let Some(r) = rng.as_deref_mut() {
                indoor += noise * gaussian(r);
            }
        }
        (out, indoor)
    }

    /// Midnight indoor temperature of the noise-free periodic regime.
    fn periodic_start(&self, profile: &Profile) -> f64 {
        let mut indoor = self.outdoor_base(0);
        for _ in 0..20 {
            indoor = self.day(profile, indoor, 0.0, None).1;
        }
        indoor
    }
}

/// Generates `days` days with balanced, shuffled profile labels.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    if config.profiles == 0 || config.profiles > MAX_PROFILES {
        return Err(Error::InvalidArgument(format!(
            "profile count must lie in 1..={MAX_PROFILES}, got {}",
            config.profiles
        )));
    }
    if config.interval_minutes == 0 || 1440 % config.interval_minutes != 0 || 60 % config.interval_minutes != 0 {
        return Err(Error::InvalidArgument(format!(
            "interval of {} minutes must divide an hour",
            config.interval_minutes
        )));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise {} must be >= 0", config.noise)));
    }
    let steps = (1440 / config.interval_minutes) as usize;
    let sim = Simulator { config, steps };
    let profiles: Vec<Profile> = (0..config.profiles)
        .map(|i| profile(i, config.mode, (60 / config.interval_minutes) as usize))
        .collect();
    let starts: Vec<f64> = profiles.iter().map(|p| sim.periodic_start(p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels: Vec<usize> = (0..config.days).map(|d| d % config.profiles).collect();
    labels.shuffle(&mut rng);

    let mut windows = Vec::with_capacity(config.days);
    let mut carried: Option<f64> = None;
    for (d, &label) in labels.iter().enumerate() {
        let date = config.start_date + Duration::days(d as i64);
        let offset = 10.0 * config.noise * gaussian(&mut rng);
        let start = match (config.carry_state, carried) {
            (true, Some(v)) => v,
            _ => starts[label],
        };
        let noisy = config.noise > 0.0;
        let (values, end) = sim.day(&profiles[label], start, offset, noisy.then_some(&mut rng));
        carried = Some(end);
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight");
        let records = values
            .into_iter()
            .enumerate()
            .map(|(i, (indoor, outdoor, power))| SensorRecord {
                timestamp: midnight + Duration::minutes(i64::from(config.interval_minutes) * i as i64),
                indoor_temp: indoor,
                outdoor_temp: outdoor,
                hvac_power: power,
            })
            .collect();
        windows.push(DayWindow { date, records });
    }
    Ok(SynthDataset { windows, labels })
}

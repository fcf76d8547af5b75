//! Sensor log ingestion: CSV parsing, grid regularization, gap filling and
//! day segmentation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INTERVAL_MINUTES: u32 = 5;
/// Longest run of missing grid steps that is interpolated (30 min at 5 min).
pub const DEFAULT_MAX_GAP: usize = 6;

const ISO_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const TIMESTAMP_FORMATS: &[&str] = &[
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
];

/// The three measured quantities of a building zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    IndoorTemp,
    OutdoorTemp,
    HvacPower,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::IndoorTemp, Channel::OutdoorTemp, Channel::HvacPower];

    pub fn name(self) -> &'static str {
        match self {
            Channel::IndoorTemp => "indoor_temp",
            Channel::OutdoorTemp => "outdoor_temp",
            Channel::HvacPower => "hvac_power",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One timestamped observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub timestamp: NaiveDateTime,
    /// Degrees Celsius.
    pub indoor_temp: f64,
    /// Degrees Celsius.
    pub outdoor_temp: f64,
    /// Watts, never negative.
    pub hvac_power: f64,
}

impl SensorRecord {
    pub fn new(timestamp: NaiveDateTime, indoor_temp: f64, outdoor_temp: f64, hvac_power: f64) -> Result<Self> {
        let record = SensorRecord {
            timestamp,
            indoor_temp,
            outdoor_temp,
            hvac_power,
        };
        record.validate().map_err(Error::InvalidArgument)?;
        Ok(record)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.indoor_temp.is_finite() {
            return Err(format!("indoor temperature {} is not finite", self.indoor_temp));
        }
        if !self.outdoor_temp.is_finite() {
            return Err(format!("outdoor temperature {} is not finite", self.outdoor_temp));
        }
        if !(self.hvac_power >= 0.0 && self.hvac_power.is_finite()) {
            return Err(format!("HVAC power {} must be finite and >= 0", self.hvac_power));
        }
        Ok(())
    }

    pub fn value(&self, channel: Channel) -> f64 {
        match channel {
            Channel::IndoorTemp => self.indoor_temp,
            Channel::OutdoorTemp => self.outdoor_temp,
            Channel::HvacPower => self.hvac_power,
        }
    }

    fn set(&mut self, channel: Channel, value: f64) {
        match channel {
            Channel::IndoorTemp => self.indoor_temp = value,
            Channel::OutdoorTemp => self.outdoor_temp = value,
            Channel::HvacPower => self.hvac_power = value,
        }
    }
}

/// Maps the required quantities onto CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub time: String,
    pub indoor_temp: String,
    pub outdoor_temp: String,
    pub hvac_power: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            time: "time".into(),
            indoor_temp: "indoor_temp_c".into(),
            outdoor_temp: "outdoor_temp_c".into(),
            hvac_power: "hvac_power_w".into(),
        }
    }
}

/// Timestamp-ordered records. Parsed tables may be irregular; tables derived
/// from a [`GridTable`] sit on an exact grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesTable {
    pub interval_minutes: u32,
    pub records: Vec<SensorRecord>,
}

impl TimeSeriesTable {
    pub fn new(interval_minutes: u32, records: Vec<SensorRecord>) -> Self {
        TimeSeriesTable {
            interval_minutes,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when timestamps increase by exactly one interval each step.
    pub fn is_regular(&self) -> bool {
        let step = Duration::minutes(i64::from(self.interval_minutes));
        self.records.windows(2).all(|w| w[1].timestamp - w[0].timestamp == step)
    }
}

fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    for format in TIMESTAMP_FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(text, format) {
            return Some(ts);
        }
    }
    // Offsets are ignored: logs are kept in the building's local civil time.
    DateTime::parse_from_rfc3339(text).ok().map(|dt| dt.naive_local())
}

/// Reads a sensor CSV file. See [`read_sensor_csv`].
pub fn parse_sensor_csv(path: &Path, schema: &ColumnSchema) -> Result<TimeSeriesTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sensor_csv(file, schema, path)
}

/// Parses sensor rows, sorts them by time and collapses duplicate
/// timestamps, keeping the last occurrence in file order.
pub fn read_sensor_csv<R: Read>(reader: R, schema: &ColumnSchema, source: &Path) -> Result<TimeSeriesTable> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: source.to_path_buf(),
                column: name.to_string(),
            })
    };
    let time_col = column(&schema.time)?;
    let indoor_col = column(&schema.indoor_temp)?;
    let outdoor_col = column(&schema.outdoor_temp)?;
    let power_col = column(&schema.hvac_power)?;

    let mut records = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let parse_err = |row: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            row,
            message,
        };
        let row = row.map_err(|e| {
            let line = e.position().map_or(i + 2, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(i + 2, |p| p.line() as usize);
        let cell = |col: usize, name: &str| {
            row.get(col)
                .ok_or_else(|| parse_err(line, format!("missing cell for `{name}`")))
        };
        let time_text = cell(time_col, &schema.time)?;
        let timestamp = parse_timestamp(time_text)
            .ok_or_else(|| parse_err(line, format!("unparseable timestamp `{time_text}`")))?;
        let number = |col: usize, name: &str| -> Result<f64> {
            let text = cell(col, name)?;
            text.parse::<f64>()
                .map_err(|_| parse_err(line, format!("unparseable number `{text}` in `{name}`")))
        };
        let record = SensorRecord {
            timestamp,
            indoor_temp: number(indoor_col, &schema.indoor_temp)?,
            outdoor_temp: number(outdoor_col, &schema.outdoor_temp)?,
            hvac_power: number(power_col, &schema.hvac_power)?,
        };
        record.validate().map_err(|m| parse_err(line, m))?;
        records.push(record);
    }

    // Stable sort keeps file order among equal timestamps.
    records.sort_by_key(|r| r.timestamp);
    let mut deduped: Vec<SensorRecord> = Vec::with_capacity(records.len());
    for record in records {
        match deduped.last_mut() {
            Some(last) if last.timestamp == record.timestamp => *last = record,
            _ => deduped.push(record),
        }
    }
    Ok(TimeSeriesTable::new(DEFAULT_INTERVAL_MINUTES, deduped))
}

/// Writes records with ISO-8601 timestamps under the schema's headers.
pub fn write_sensor_csv<W: Write>(writer: W, records: &[SensorRecord], schema: &ColumnSchema) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        &schema.time,
        &schema.indoor_temp,
        &schema.outdoor_temp,
        &schema.hvac_power,
    ])?;
    for r in records {
        csv.write_record([
            r.timestamp.format(ISO_FORMAT).to_string(),
            r.indoor_temp.to_string(),
            r.outdoor_temp.to_string(),
            r.hvac_power.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// A table laid onto an exact time grid. Missing steps are `None` until
/// [`fill_gaps`] interpolates them; dates holding unfillable gaps are listed
/// in `invalid_dates`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
    pub slots: Vec<Option<SensorRecord>>,
    pub invalid_dates: BTreeSet<NaiveDate>,
}

impl GridTable {
    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::minutes(i64::from(self.interval_minutes) * index as i64)
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn gap_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// Present records only.
    pub fn to_table(&self) -> TimeSeriesTable {
        TimeSeriesTable::new(self.interval_minutes, self.slots.iter().flatten().copied().collect())
    }

    /// Slot range covering `date`, clipped to the grid.
    pub fn day_range(&self, date: NaiveDate) -> std::ops::Range<usize> {
        let step = i64::from(self.interval_minutes) * 60;
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
        let offset = (midnight - self.start).num_seconds();
        let first = offset.div_euclid(step) + i64::from(offset.rem_euclid(step) != 0);
        let last = first + self.steps_per_day() as i64;
        let clip = |v: i64| v.clamp(0, self.slots.len() as i64) as usize;
        clip(first)..clip(last)
    }
}

fn check_interval(interval_minutes: u32) -> Result<()> {
    if interval_minutes == 0 || 1440 % interval_minutes != 0 {
        return Err(Error::InvalidArgument(format!(
            "interval of {interval_minutes} minutes does not divide a day"
        )));
    }
    Ok(())
}

/// Lays records onto the grid of `interval_minutes` steps aligned to local
/// midnight, starting at the first grid point at or after the first record.
/// Each grid point takes the nearest record within half an interval (ties
/// go to the earlier record); otherwise it is left as a gap.
pub fn resample_to_grid(table: &TimeSeriesTable, interval_minutes: u32) -> Result<GridTable> {
    check_interval(interval_minutes)?;
    let records = &table.records;
    if records.is_empty() {
        return Err(Error::TooFew {
            what: "records to resample",
            needed: 1,
            got: 0,
        });
    }
    let step = i64::from(interval_minutes) * 60;
    let half = step / 2;
    let secs = |ts: NaiveDateTime| ts.and_utc().timestamp();
    let first = secs(records[0].timestamp);
    let last = secs(records[records.len() - 1].timestamp);
    let start = first.div_euclid(step) * step + if first.rem_euclid(step) != 0 { step } else { 0 };
    let end = (last + half).div_euclid(step) * step;
    let start_ts = DateTime::from_timestamp(start, 0)
        .expect("grid start in range")
        .naive_utc();

    let mut slots = Vec::new();
    let mut j = 0usize;
    let mut grid = start;
    while grid <= end {
        while j + 1 < records.len() && secs(records[j + 1].timestamp) <= grid {
            j += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        for candidate in [j, j + 1] {
            if candidate >= records.len() {
                continue;
            }
            let distance = (secs(records[candidate].timestamp) - grid).abs();
            if distance <= half && best.is_none_or(|(d, _)| distance < d) {
                best = Some((distance, candidate));
            }
        }
        slots.push(best.map(|(_, idx)| {
            SensorRecord {
                timestamp: DateTime::from_timestamp(grid, 0)
                    .expect("grid point in range")
                    .naive_utc(),
                ..records[idx]
            }
        }));
        grid += step;
    }

    Ok(GridTable {
        start: start_ts,
        interval_minutes,
        slots,
        invalid_dates: BTreeSet::new(),
    })
}

/// Linearly interpolates interior gaps of at most `max_gap` steps. Longer
/// gaps, and gaps touching either end of the grid, stay empty and mark
/// every date they touch as invalid.
pub fn fill_gaps(grid: &GridTable, max_gap: usize) -> GridTable {
    let mut out = grid.clone();
    let n = out.slots.len();
    let mut i = 0;
    while i < n {
        if out.slots[i].is_some() {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < n && out.slots[i].is_none() {
            i += 1;
        }
        let run_end = i;
        let len = run_end - run_start;
        let bounded = run_start > 0 && run_end < n;
        if bounded && len <= max_gap {
            let left = out.slots[run_start - 1].expect("left neighbour present");
            let right = out.slots[run_end].expect("right neighbour present");
            for (offset, slot) in (run_start..run_end).enumerate() {
                let frac = (offset + 1) as f64 / (len + 1) as f64;
                let mut record = left;
                record.timestamp = out.timestamp(slot);
                for channel in Channel::ALL {
                    let (a, b) = (left.value(channel), right.value(channel));
                    record.set(channel, a + (b - a) * frac);
                }
                out.slots[slot] = Some(record);
            }
        } else {
            for slot in run_start..run_end {
                out.invalid_dates.insert(out.timestamp(slot).date());
            }
        }
    }
    out
}

/// One calendar day of grid records, starting at local midnight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayWindow {
    pub date: NaiveDate,
    pub records: Vec<SensorRecord>,
}

impl DayWindow {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channel(&self, channel: Channel) -> Vec<f64> {
        self.records.iter().map(|r| r.value(channel)).collect()
    }

    /// Checks the window covers exactly its date on a regular grid.
    pub fn is_well_formed(&self, interval_minutes: u32) -> bool {
        let steps = (1440 / interval_minutes) as usize;
        let step = Duration::minutes(i64::from(interval_minutes));
        self.records.len() == steps
            && self.records[0].timestamp == self.date.and_hms_opt(0, 0, 0).expect("midnight")
            && self.records.windows(2).all(|w| w[1].timestamp - w[0].timestamp == step)
            && self.records.iter().all(|r| r.timestamp.date() == self.date)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DropReason {
    /// Fewer grid steps than a full day.
    Partial { present: usize, expected: usize },
    /// Holds a gap longer than the fill limit.
    Invalid { missing: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub date: NaiveDate,
    pub reason: DropReason,
}

impl fmt::Display for DropReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            DropReason::Partial { present, expected } => {
                write!(f, "{} partial {present}/{expected} steps", self.date)
            }
            DropReason::Invalid { missing } => {
                write!(f, "{} invalid {missing} unfilled steps", self.date)
            }
        }
    }
}

/// Writes one drop report per line.
pub fn write_drop_report<W: Write>(mut writer: W, drops: &[DropReport]) -> std::io::Result<()> {
    for drop in drops {
        writeln!(writer, "{drop}")?;
    }
    Ok(())
}

/// Cuts the grid into full, valid calendar days.
pub fn segment_into_days(grid: &GridTable) -> (Vec<DayWindow>, Vec<DropReport>) {
    let mut windows = Vec::new();
    let mut drops = Vec::new();
    if grid.slots.is_empty() {
        return (windows, drops);
    }
    let expected = grid.steps_per_day();
    let first_date = grid.start.date();
    let last_date = grid.timestamp(grid.slots.len() - 1).date();
    let mut date = first_date;
    while date <= last_date {
        let range = grid.day_range(date);
        let slots = &grid.slots[range.clone()];
        let present = slots.iter().filter(|s| s.is_some()).count();
        let starts_at_midnight = grid.timestamp(range.start).time().num_seconds_from_midnight() == 0;
        if grid.invalid_dates.contains(&date) {
            drops.push(DropReport {
                date,
                reason: DropReason::Invalid {
                    missing: slots.len() - present,
                },
            });
        } else if slots.len() < expected || present < expected || !starts_at_midnight {
            drops.push(DropReport {
                date,
                reason: DropReason::Partial { present, expected },
            });
        } else {
            windows.push(DayWindow {
                date,
                records: slots.iter().flatten().copied().collect(),
            });
        }
        date = date.succ_opt().expect("date in range");
    }
    (windows, drops)
}

/// Chronological split: the earliest `ceil(ratio * N)` days train, the
/// rest test. The train share is clamped so both sides keep at least one
/// day.
pub fn split_train_test(windows: &[DayWindow], ratio: f64) -> Result<(&[DayWindow], &[DayWindow])> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} must lie strictly between 0 and 1"
        )));
    }
    if windows.len() < 2 {
        return Err(Error::TooFew {
            what: "day windows to split",
            needed: 2,
            got: windows.len(),
        });
    }
    debug_assert!(windows.windows(2).all(|w| w[0].date < w[1].date));
    let n = windows.len();
    // Tolerance absorbs products like 0.7 * 10 = 7.000000000000001.
    let train = ((ratio * n as f64) - 1e-9).ceil() as usize;
    Ok(windows.split_at(train.clamp(1, n - 1)))
}

/// Errors unless consecutive windows are consecutive calendar days.
pub fn check_contiguous(windows: &[DayWindow]) -> Result<()> {
    for pair in windows.windows(2) {
        if pair[0].date.succ_opt() != Some(pair[1].date) {
            return Err(Error::NotContiguous {
                before: pair[0].date,
                after: pair[1].date,
            });
        }
    }
    Ok(())
}

/// Splits chronologically ordered windows into maximal runs of consecutive
/// dates.
pub fn contiguous_runs(windows: &[DayWindow]) -> Vec<&[DayWindow]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=windows.len() {
        if i == windows.len() || windows[i - 1].date.succ_opt() != Some(windows[i].date) {
            if i > start {
                runs.push(&windows[start..i]);
            }
            start = i;
        }
    }
    runs
}

/// Full ingest: parse-independent regularization and segmentation.
pub fn regularize(
    table: &TimeSeriesTable,
    interval_minutes: u32,
    max_gap: usize,
) -> Result<(GridTable, Vec<DayWindow>, Vec<DropReport>)> {
    let grid = fill_gaps(&resample_to_grid(table, interval_minutes)?, max_gap);
    let (windows, drops) = segment_into_days(&grid);
    Ok((grid, windows, drops))
}

use std::collections::BTreeSet;

use chrono::NaiveDate;

use super::expr::{Expr, SeriesCursor};
use crate::error::{Error, Result};
use crate::ingest::{check_contiguous, contiguous_runs, Channel, DayWindow};

/// Default lag budget: one day of 5-minute steps.
pub const DEFAULT_LAG_BUDGET: usize = 288;

/// Supervised rows `(lag history, indoor temperature)`.
///
/// Channel data is stored as concatenated contiguous blocks; each row is a
/// target position with at least `lag_budget` steps of history inside its
/// own block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    lag_budget: usize,
    series: [Vec<f64>; 3],
    rows: Vec<usize>,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn lag_budget(&self) -> usize {
        self.lag_budget
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Lag lookup for row `row`.
    pub fn cursor(&self, row: usize) -> SeriesCursor<'_> {
        SeriesCursor {
            series: [&self.series[0], &self.series[1], &self.series[2]],
            position: self.rows[row],
        }
    }

    /// Builds rows from contiguous blocks of days, keeping only targets on
    /// days accepted by `include`. History may come from any day of the
    /// block.
    pub fn from_blocks<'a>(
        blocks: impl IntoIterator<Item = &'a [DayWindow]>,
        lag_budget: usize,
        include: impl Fn(NaiveDate) -> bool,
    ) -> Result<TrainingSet> {
        if lag_budget == 0 {
            return Err(Error::InvalidArgument("lag budget must be at least 1".into()));
        }
        let mut set = TrainingSet {
            lag_budget,
            series: [Vec::new(), Vec::new(), Vec::new()],
            rows: Vec::new(),
            targets: Vec::new(),
        };
        for block in blocks {
            check_contiguous(block)?;
            let offset = set.series[0].len();
            let mut step = 0;
            for window in block {
                let keep = include(window.date);
                for record in &window.records {
                    for channel in Channel::ALL {
                        set.series[channel.index()].push(record.value(channel));
                    }
                    if keep && step >= lag_budget {
                        set.rows.push(offset + step);
                        set.targets.push(record.indoor_temp);
                    }
                    step += 1;
                }
            }
        }
        Ok(set)
    }

    /// Rows whose targets fall on `dates`, with history drawn from every
    /// contiguous run in `windows`.
    pub fn for_dates(windows: &[DayWindow], dates: &BTreeSet<NaiveDate>, lag_budget: usize) -> Result<TrainingSet> {
        TrainingSet::from_blocks(contiguous_runs(windows), lag_budget, |d| dates.contains(&d))
    }

    /// Predictions for every row, evaluated column-wise.
    pub fn predict(&self, expr: &Expr) -> Vec<f64> {
        match expr {
            Expr::Var(r) => {
                let s = &self.series[r.channel.index()];
                self.rows.iter().map(|&i| s[i - r.lag]).collect()
            }
            Expr::Const(c) => vec![*c; self.rows.len()],
            Expr::Unary(op, x) => {
                let mut v = self.predict(x);
                v.iter_mut().for_each(|x| *x = op.apply(*x));
                v
            }
            Expr::Binary(op, a, b) => {
                let mut va = self.predict(a);
                let vb = self.predict(b);
                va.iter_mut().zip(vb).for_each(|(x, y)| *x = op.apply(*x, y));
                va
            }
        }
    }

    /// Mean squared error; infinite when any prediction is not finite.
    pub fn mse(&self, expr: &Expr) -> f64 {
        if self.rows.is_empty() {
            return f64::INFINITY;
        }
        let predictions = self.predict(expr);
        let mut sum = 0.0;
        for (p, t) in predictions.iter().zip(&self.targets) {
            if !p.is_finite() {
                return f64::INFINITY;
            }
            sum += (p - t) * (p - t);
        }
        if sum.is_finite() {
            sum / self.rows.len() as f64
        } else {
            f64::INFINITY
        }
    }
}

/// One row per step with a full `lag_budget` history across contiguous
/// days.
pub fn build_training_set(windows: &[DayWindow], lag_budget: usize) -> Result<TrainingSet> {
    check_contiguous(windows)?;
    let total: usize = windows.iter().map(DayWindow::len).sum();
    if total <= lag_budget {
        return Err(Error::InsufficientHistory {
            needed: lag_budget + 1,
            got: total,
        });
    }
    TrainingSet::from_blocks(std::iter::once(windows), lag_budget, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SensorRecord;
    use crate::sr::LagRef;
    use chrono::Duration;

    pub(crate) fn ramp_days(n: usize, skip: Option<usize>) -> Vec<DayWindow> {
        let base = NaiveDate::from_ymd_opt(2022, 7, 1).unwrap();
        (0..n + usize::from(skip.is_some()))
            .filter(|d| Some(*d) != skip)
            .map(|d| {
                let date = base + Duration::days(d as i64);
                let start = date.and_hms_opt(0, 0, 0).unwrap();
                DayWindow {
                    date,
                    records: (0..288)
                        .map(|i| SensorRecord {
                            timestamp: start + Duration::minutes(5 * i as i64),
                            indoor_temp: (d * 288 + i) as f64,
                            outdoor_temp: -((d * 288 + i) as f64),
                            hvac_power: 1.0,
                        })
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn row_counts() {
        let set = build_training_set(&ramp_days(2, None), 288).unwrap();
        assert_eq!(set.len(), 288);
        assert!(matches!(
            build_training_set(&ramp_days(1, None), 288),
            Err(Error::InsufficientHistory { .. })
        ));
        assert!(matches!(
            build_training_set(&ramp_days(2, Some(1)), 288),
            Err(Error::NotContiguous { .. })
        ));
    }

    #[test]
    fn lagged_columns_line_up() {
        let set = build_training_set(&ramp_days(2, None), 10).unwrap();
        assert_eq!(set.len(), 576 - 10);
        assert_eq!(set.targets()[0], 10.0);
        let e = Expr::var(LagRef::indoor(3));
        let p = set.predict(&e);
        assert_eq!(p[0], 7.0);
        assert_eq!(set.cursor(0).position, 10);
        assert_eq!(e.evaluate(&set.cursor(5)).unwrap(), p[5]);
        let e = Expr::var(LagRef::outdoor(1));
        assert_eq!(set.predict(&e)[0], -9.0);
    }

    #[test]
    fn filtered_blocks_keep_history() {
        let days = ramp_days(4, Some(2));
        let target = BTreeSet::from([days[1].date, days[2].date]);
        let set = TrainingSet::for_dates(&days, &target, 288).unwrap();
        // Day 1 has history from day 0; day 3 starts a new block with none.
        assert_eq!(set.len(), 288);
        assert_eq!(set.targets()[0], 288.0);
    }

    #[test]
    fn mse_of_perfect_and_broken_models() {
        let set = build_training_set(&ramp_days(2, None), 1).unwrap();
        let next = Expr::binary(
            crate::sr::BinaryOp::Add,
            Expr::var(LagRef::indoor(1)),
            Expr::constant(1.0),
        );
        assert_eq!(set.mse(&next), 0.0);
        let blowup = Expr::binary(
            crate::sr::BinaryOp::Mul,
            Expr::constant(1e307),
            Expr::var(LagRef::indoor(1)),
        );
        assert_eq!(set.mse(&blowup), f64::INFINITY);
    }
}

//! Traffic series storage, normalization, windowing, and chronological
//! splits. Values are speeds in original units; missing readings carry an
//! explicit mask and are stored as exact 0.0 everywhere, including after
//! normalization, so they contribute nothing downstream.

use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Regular-grid multivariate series, rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub sensor_ids: Vec<String>,
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
    /// T x N, original units; masked entries are exactly 0.0.
    pub values: Matrix,
    /// T x N, 1.0 observed / 0.0 missing.
    pub mask: Matrix,
}

impl TrafficSeries {
    pub fn num_steps(&self) -> usize {
        self.values.rows()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.interval_minutes as i64 * step as i64)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n) = self.values.shape();
        if n != self.sensor_ids.len() {
            return Err(Error::invalid(format!(
                "{} sensor ids but {} value columns",
                self.sensor_ids.len(),
                n
            )));
        }
        if self.mask.shape() != (t, n) {
            return Err(Error::invalid("mask shape differs from values"));
        }
        if self.interval_minutes == 0 {
            return Err(Error::invalid("interval must be positive"));
        }
        for i in 0..t * n {
            let m = self.mask.data()[i];
            if m != 0.0 && m != 1.0 {
                return Err(Error::invalid(format!("mask entry {i} is {m}, not 0/1")));
            }
            if m == 0.0 && self.values.data()[i] != 0.0 {
                return Err(Error::invalid(format!("masked entry {i} holds a nonzero value")));
            }
            if !self.values.data()[i].is_finite() {
                return Err(Error::invalid(format!("non-finite value at entry {i}")));
            }
        }
        Ok(())
    }
}

/// Global scalar normalization, fit on the training range only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// (x - mean) / std on observed entries; masked entries map to exact 0.0.
    pub fn normalize(&self, values: &Matrix, mask: &Matrix) -> Matrix {
        let mut out = values.clone();
        for (v, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *v = if *m == 1.0 { (*v - self.mean) / self.std } else { 0.0 };
        }
        out
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Mean and population std over observed entries in `steps`, std floored
/// at 1e-6 so constant series stay usable.
pub fn fit_normalizer(series: &TrafficSeries, steps: Range<usize>) -> Result<NormStats> {
    if steps.end > series.num_steps() {
        return Err(Error::invalid(format!(
            "fit range {:?} exceeds {} steps",
            steps,
            series.num_steps()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    for t in steps.clone() {
        for (v, m) in series.values.row(t).iter().zip(series.mask.row(t)) {
            if *m == 1.0 {
                sum += v;
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum / count;
    let mut ss = 0.0;
    for t in steps {
        for (v, m) in series.values.row(t).iter().zip(series.mask.row(t)) {
            if *m == 1.0 {
                ss += (v - mean) * (v - mean);
            }
        }
    }
    let std = (ss / count).sqrt().max(1e-6);
    Ok(NormStats { mean, std })
}

/// One forecasting instance. `anchor` is the index of the last input step;
/// inputs cover anchor-H_in+1..=anchor (normalized), targets
/// anchor+1..=anchor+H_out (original units).
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub anchor: usize,
    /// N x H_in, normalized.
    pub x: Matrix,
    pub x_mask: Matrix,
    /// N x H_out, original units.
    pub y: Matrix,
    pub y_mask: Matrix,
}

impl WindowSample {
    /// First time step the sample touches.
    pub fn span_start(&self) -> usize {
        self.anchor + 1 - self.x.cols()
    }

    /// Last time step the sample touches.
    pub fn span_end(&self) -> usize {
        self.anchor + self.y.cols()
    }
}

/// Sliding windows at the given stride. Yields
/// floor((T - H_in - H_out) / stride) + 1 samples when that is positive,
/// otherwise none.
pub fn make_windows(
    series: &TrafficSeries,
    stats: &NormStats,
    h_in: usize,
    h_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if h_in == 0 || h_out == 0 || stride == 0 {
        return Err(Error::invalid("h_in, h_out and stride must be positive"));
    }
    let t_total = series.num_steps();
    let n = series.num_sensors();
    if t_total < h_in + h_out {
        return Ok(Vec::new());
    }
    let mut samples = Vec::new();
    let mut anchor = h_in - 1;
    while anchor + h_out < t_total {
        let mut x = Matrix::zeros(n, h_in);
        let mut x_mask = Matrix::zeros(n, h_in);
        for (k, t) in (anchor + 1 - h_in..=anchor).enumerate() {
            for i in 0..n {
                x.set(i, k, series.values.get(t, i));
                x_mask.set(i, k, series.mask.get(t, i));
            }
        }
        let x = stats.normalize(&x, &x_mask);
        let mut y = Matrix::zeros(n, h_out);
        let mut y_mask = Matrix::zeros(n, h_out);
        for (k, t) in (anchor + 1..=anchor + h_out).enumerate() {
            for i in 0..n {
                y.set(i, k, series.values.get(t, i));
                y_mask.set(i, k, series.mask.get(t, i));
            }
        }
        samples.push(WindowSample { anchor, x, x_mask, y, y_mask });
        anchor += stride;
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_frac > 0.0
            && self.val_frac > 0.0
            && self.train_frac + self.val_frac < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "split fractions train={} val={} must be positive and sum below 1",
                self.train_frac, self.val_frac
            )))
        }
    }
}

#[derive(Debug)]
pub struct SplitResult {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Samples discarded from val/test so window spans never overlap an
    /// earlier split.
    pub dropped_val: usize,
    pub dropped_test: usize,
}

/// Chronological split by sample counts, then boundary samples whose spans
/// reach back into the previous split are dropped from the later one.
pub fn chronological_split(samples: Vec<WindowSample>, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let n = samples.len();
    let n_train = (n as f64 * spec.train_frac).floor() as usize;
    let n_val = (n as f64 * spec.val_frac).floor() as usize;

    let mut iter = samples.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let mut val: Vec<_> = iter.by_ref().take(n_val).collect();
    let mut test: Vec<_> = iter.collect();

    let Some(train_last) = train.last() else {
        return Err(Error::invalid(format!("train split is empty ({n} samples total)")));
    };
    let train_end = train_last.span_end();
    let before = val.len();
    val.retain(|s| s.span_start() > train_end);
    let dropped_val = before - val.len();

    let val_end = val.last().map(|s| s.span_end()).unwrap_or(train_end);
    let before = test.len();
    test.retain(|s| s.span_start() > val_end);
    let dropped_test = before - test.len();

    if val.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!(
            "split too small: {} train, {} val, {} test after boundary drops",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(SplitResult { train, val, test, dropped_val, dropped_test })
}

/// Writes `timestamp,<id>,...` rows; missing readings become empty cells.
pub fn save_series_csv(path: &Path, series: &TrafficSeries) -> Result<()> {
    series.validate()?;
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.sensor_ids.iter().cloned());
    writer.write_record(&header).map_err(csv_err)?;
    for t in 0..series.num_steps() {
        let mut record = vec![series.timestamp(t).format(TIMESTAMP_FORMAT).to_string()];
        for i in 0..series.num_sensors() {
            if series.mask.get(t, i) == 1.0 {
                record.push(format!("{}", series.values.get(t, i)));
            } else {
                record.push(String::new());
            }
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_series_csv(path: &Path) -> Result<TrafficSeries> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.len() < 2 || header.get(0) != Some("timestamp") {
        return Err(Error::invalid(format!(
            "{} must start with a `timestamp` column followed by sensor ids",
            path.display()
        )));
    }
    let sensor_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = sensor_ids.len();

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<f64> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != n + 1 {
            return Err(Error::invalid(format!(
                "row {} has {} fields, expected {}",
                timestamps.len() + 2,
                row.len(),
                n + 1
            )));
        }
        let ts = NaiveDateTime::parse_from_str(&row[0], TIMESTAMP_FORMAT)
            .map_err(|e| Error::invalid(format!("bad timestamp `{}`: {e}", &row[0])))?;
        timestamps.push(ts);
        for field in row.iter().skip(1) {
            if field.is_empty() {
                values.push(0.0);
                mask.push(0.0);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad value `{field}`: {e}")))?;
                values.push(v);
                mask.push(1.0);
            }
        }
    }
    if timestamps.len() < 2 {
        return Err(Error::invalid(format!("{} has fewer than two rows", path.display())));
    }
    let step = timestamps[1] - timestamps[0];
    let interval_minutes = step.num_minutes();
    if interval_minutes <= 0 || step != Duration::minutes(interval_minutes) {
        return Err(Error::invalid(format!("non-positive or sub-minute interval {step}")));
    }
    for (k, pair) in timestamps.windows(2).enumerate() {
        if pair[1] - pair[0] != step {
            return Err(Error::invalid(format!(
                "irregular spacing between rows {} and {}",
                k + 2,
                k + 3
            )));
        }
    }
    let t_total = timestamps.len();
    let series = TrafficSeries {
        sensor_ids,
        start: timestamps[0],
        interval_minutes: interval_minutes as u32,
        values: Matrix::from_vec(t_total, n, values)?,
        mask: Matrix::from_vec(t_total, n, mask)?,
    };
    series.validate()?;
    Ok(series)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv error: {e}"))
}

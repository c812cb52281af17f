//! Masked forecast metrics and event-impact stratification.
//!
//! MAE and RMSE run over every observed target entry. MAPE additionally
//! drops targets with |y| < 1.0: dividing by near-zero speeds would let a
//! handful of entries dominate the percentage. All three are computed in
//! the series' original units.

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::events::{EventRecord, ImpactClass};
use crate::numerics::Matrix;

/// Which prediction step a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// 1-indexed step within the prediction window.
    Step(usize),
    /// All steps pooled.
    Average,
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Horizon::Step(k) => write!(f, "{k}"),
            Horizon::Average => write!(f, "average"),
        }
    }
}

/// MAPE ignores targets below this magnitude.
pub const MAPE_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; 0 when no entry clears MAPE_FLOOR.
    pub mape: f64,
    /// Entries behind mae and rmse.
    pub count: usize,
    /// Entries behind mape.
    pub mape_count: usize,
    pub horizon: Horizon,
}

/// Elementwise metrics over observed entries. `mask` is 1.0 where the
/// target is observed; shapes must agree.
pub fn compute(y: &Matrix, y_hat: &Matrix, mask: &Matrix) -> Result<MetricReport> {
    compute_labeled(y, y_hat, mask, Horizon::Average)
}

fn compute_labeled(y: &Matrix, y_hat: &Matrix, mask: &Matrix, horizon: Horizon) -> Result<MetricReport> {
    if y.shape() != y_hat.shape() || y.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "metric shapes disagree: y {:?}, y_hat {:?}, mask {:?}",
            y.shape(),
            y_hat.shape(),
            mask.shape()
        )));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    let mut pct_sum = 0.0;
    let mut mape_count = 0usize;
    for ((&t, &p), &m) in y.data().iter().zip(y_hat.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        let err = p - t;
        abs_sum += err.abs();
        sq_sum += err * err;
        count += 1;
        if t.abs() >= MAPE_FLOOR {
            pct_sum += (err / t).abs();
            mape_count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(MetricReport {
        mae: abs_sum / count as f64,
        rmse: (sq_sum / count as f64).sqrt(),
        mape: if mape_count == 0 { 0.0 } else { 100.0 * pct_sum / mape_count as f64 },
        count,
        mape_count,
        horizon,
    })
}

/// Per-horizon reports plus a pooled average. Each sample is N x H_out;
/// horizon k (1-indexed) reads column k-1 of every sample.
pub fn per_horizon(
    targets: &[Matrix],
    preds: &[Matrix],
    masks: &[Matrix],
    horizons: &[usize],
) -> Result<Vec<MetricReport>> {
    if targets.len() != preds.len() || targets.len() != masks.len() {
        return Err(Error::invalid("sample lists differ in length"));
    }
    if targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    let h_out = targets[0].cols();
    if let Some(&bad) = horizons.iter().find(|&&h| h == 0 || h > h_out) {
        return Err(Error::invalid(format!(
            "horizon {bad} outside prediction window of {h_out} steps"
        )));
    }
    let stack = |col: Option<usize>| -> (Matrix, Matrix, Matrix) {
        let width = col.map_or(h_out, |_| 1);
        let rows: usize = targets.iter().map(Matrix::rows).sum();
        let mut y = Matrix::zeros(rows, width);
        let mut p = Matrix::zeros(rows, width);
        let mut m = Matrix::zeros(rows, width);
        let mut r0 = 0;
        for ((ty, tp), tm) in targets.iter().zip(preds).zip(masks) {
            for r in 0..ty.rows() {
                for (w, c) in (0..width).zip(col.map_or(0..h_out, |c| c..c + 1)) {
                    y.set(r0 + r, w, ty.get(r, c));
                    p.set(r0 + r, w, tp.get(r, c));
                    m.set(r0 + r, w, tm.get(r, c));
                }
            }
            r0 += ty.rows();
        }
        (y, p, m)
    };
    let mut reports = Vec::with_capacity(horizons.len() + 1);
    for &h in horizons {
        let (y, p, m) = stack(Some(h - 1));
        reports.push(compute_labeled(&y, &p, &m, Horizon::Step(h))?);
    }
    let (y, p, m) = stack(None);
    reports.push(compute_labeled(&y, &p, &m, Horizon::Average)?);
    Ok(reports)
}

/// One evaluated test sample with the wall-clock span its targets cover.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub target: Matrix,
    pub pred: Matrix,
    pub mask: Matrix,
    /// Half-open target window.
    pub window_start: NaiveDateTime,
    pub window_end: NaiveDateTime,
}

#[derive(Debug, Clone)]
pub struct StratumReport {
    pub impact: ImpactClass,
    pub samples: usize,
    pub report: MetricReport,
}

/// Split samples by the strongest event overlapping their target window
/// and report metrics per class. Classes nothing falls into are omitted,
/// so the returned strata partition the sample set.
pub fn stratify(samples: &[SampleEval], events: &[EventRecord]) -> Result<Vec<StratumReport>> {
    let mut buckets: [Vec<&SampleEval>; 4] = Default::default();
    for sample in samples {
        let mut class = ImpactClass::None;
        for event in events {
            if event.window_start < sample.window_end && sample.window_start < event.window_end {
                class = class.max(event.impact);
            }
        }
        buckets[class as usize].push(sample);
    }
    let mut reports = Vec::new();
    for (idx, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let targets: Vec<Matrix> = bucket.iter().map(|s| s.target.clone()).collect();
        let preds: Vec<Matrix> = bucket.iter().map(|s| s.pred.clone()).collect();
        let masks: Vec<Matrix> = bucket.iter().map(|s| s.mask.clone()).collect();
        let all = per_horizon(&targets, &preds, &masks, &[])?;
        reports.push(StratumReport {
            impact: match idx {
                0 => ImpactClass::None,
                1 => ImpactClass::Minor,
                2 => ImpactClass::Moderate,
                _ => ImpactClass::High,
            },
            samples: bucket.len(),
            report: all[0],
        });
    }
    Ok(reports)
}

/// Flatten labeled reports to `stratum,horizon,mae,rmse,mape,count` rows.
pub fn to_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("stratum,horizon,mae,rmse,mape,count\n");
    for (stratum, r) in rows {
        out.push_str(&format!(
            "{stratum},{},{},{},{},{}\n",
            r.horizon, r.mae, r.rmse, r.mape, r.count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use chrono::NaiveDate;

    fn m(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn ones(rows: usize, cols: usize) -> Matrix {
        Matrix::full(rows, cols, 1.0)
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let y = m(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let r = compute(&y, &y, &ones(2, 2)).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
        assert_eq!(r.count, 4);
    }

    #[test]
    fn hand_case_with_consistent_triple() {
        // MAE 1.5, RMSE sqrt(2.5) and MAPE 75% only hold together for
        // targets [2, 2]; checked by hand before freezing.
        let y = m(1, 2, vec![2.0, 2.0]);
        let y_hat = m(1, 2, vec![3.0, 4.0]);
        let r = compute(&y, &y_hat, &ones(1, 2)).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((r.mape - 75.0).abs() < 1e-12);
    }

    #[test]
    fn hand_case_with_uneven_targets() {
        // Same errors against targets [1, 2] move only the percentage.
        let y = m(1, 2, vec![1.0, 2.0]);
        let y_hat = m(1, 2, vec![2.0, 4.0]);
        let r = compute(&y, &y_hat, &ones(1, 2)).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((r.mape - 100.0).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_invisible() {
        let y = m(1, 2, vec![0.0, 2.0]);
        let y_hat = m(1, 2, vec![100.0, 2.0]);
        let mask = m(1, 2, vec![0.0, 1.0]);
        let r = compute(&y, &y_hat, &mask).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
        assert_eq!(r.count, 1);
    }

    #[test]
    fn small_targets_leave_mape_only() {
        let y = m(1, 2, vec![0.5, 10.0]);
        let y_hat = m(1, 2, vec![1.5, 12.0]);
        let r = compute(&y, &y_hat, &ones(1, 2)).unwrap();
        assert_eq!(r.count, 2);
        assert_eq!(r.mape_count, 1);
        assert!((r.mape - 20.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let y = ones(2, 2);
        assert!(matches!(compute(&y, &y, &Matrix::zeros(2, 2)), Err(Error::EmptyMask)));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = RngState::new(42);
        for _ in 0..100 {
            let rows = 1 + (rng.uniform(0.0, 5.0) as usize);
            let cols = 1 + (rng.uniform(0.0, 5.0) as usize);
            let y = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-30.0, 70.0));
            let y_hat = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-30.0, 70.0));
            let mut mask = Matrix::from_fn(rows, cols, |_, _| f64::from(rng.uniform(0.0, 1.0) > 0.3));
            mask.set(0, 0, 1.0);
            let r = compute(&y, &y_hat, &mask).unwrap();
            // Independent accumulation, column-major on purpose.
            let (mut a, mut s, mut p) = (0.0f64, 0.0f64, 0.0f64);
            let (mut n, mut np) = (0usize, 0usize);
            for c in 0..cols {
                for row in 0..rows {
                    if mask.get(row, c) == 0.0 {
                        continue;
                    }
                    let e = y_hat.get(row, c) - y.get(row, c);
                    a += e.abs();
                    s += e * e;
                    n += 1;
                    if y.get(row, c).abs() >= 1.0 {
                        p += (e / y.get(row, c)).abs();
                        np += 1;
                    }
                }
            }
            assert!((r.mae - a / n as f64).abs() < 1e-9);
            assert!((r.rmse - (s / n as f64).sqrt()).abs() < 1e-9);
            let mape = if np == 0 { 0.0 } else { 100.0 * p / np as f64 };
            assert!((r.mape - mape).abs() < 1e-9);
            assert!(r.rmse >= r.mae, "rmse {} < mae {}", r.rmse, r.mae);
        }
    }

    #[test]
    fn horizon_reports_follow_table_structure() {
        let mut rng = RngState::new(7);
        let samples: Vec<(Matrix, Matrix, Matrix)> = (0..4)
            .map(|_| {
                (
                    Matrix::from_fn(3, 12, |_, _| rng.uniform(20.0, 70.0)),
                    Matrix::from_fn(3, 12, |_, _| rng.uniform(20.0, 70.0)),
                    ones(3, 12),
                )
            })
            .collect();
        let targets: Vec<Matrix> = samples.iter().map(|s| s.0.clone()).collect();
        let preds: Vec<Matrix> = samples.iter().map(|s| s.1.clone()).collect();
        let masks: Vec<Matrix> = samples.iter().map(|s| s.2.clone()).collect();
        let reports = per_horizon(&targets, &preds, &masks, &[3, 6, 12]).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[0].horizon, Horizon::Step(3));
        assert_eq!(reports[3].horizon, Horizon::Average);
        assert_eq!(reports[3].count, 4 * 3 * 12);
        // Average MAE is the mean of the twelve per-step MAEs with equal
        // counts; spot check via the full-step reports.
        let all: Vec<MetricReport> =
            per_horizon(&targets, &preds, &masks, &(1..=12).collect::<Vec<_>>()).unwrap();
        let mean: f64 = all[..12].iter().map(|r| r.mae).sum::<f64>() / 12.0;
        assert!((reports[3].mae - mean).abs() < 1e-9);
        assert!(per_horizon(&targets, &preds, &masks, &[13]).is_err());
    }

    #[test]
    fn constant_error_is_flat_across_horizons() {
        let y = vec![ones(2, 6)];
        let y_hat = vec![Matrix::full(2, 6, 3.0)];
        let masks = vec![ones(2, 6)];
        let reports = per_horizon(&y, &y_hat, &masks, &[1, 3, 6]).unwrap();
        for r in &reports {
            assert!((r.mae - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_hand_case_matches_enumeration() {
        let targets = vec![m(1, 2, vec![10.0, 20.0]), m(1, 2, vec![30.0, 40.0])];
        let preds = vec![m(1, 2, vec![11.0, 23.0]), m(1, 2, vec![28.0, 44.0])];
        let masks = vec![ones(1, 2), ones(1, 2)];
        let reports = per_horizon(&targets, &preds, &masks, &[1, 2]).unwrap();
        assert!((reports[0].mae - 1.5).abs() < 1e-12, "step 1: |1|,|2|");
        assert!((reports[1].mae - 3.5).abs() < 1e-12, "step 2: |3|,|4|");
        assert!((reports[2].mae - 2.5).abs() < 1e-12, "pooled");
    }

    fn ts(day: u32, hour: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 3, day).unwrap().and_hms_opt(hour, 0, 0).unwrap()
    }

    fn sample(start: NaiveDateTime, end: NaiveDateTime, err: f64) -> SampleEval {
        SampleEval {
            target: Matrix::full(2, 3, 50.0),
            pred: Matrix::full(2, 3, 50.0 + err),
            mask: ones(2, 3),
            window_start: start,
            window_end: end,
        }
    }

    #[test]
    fn no_events_means_one_none_stratum() {
        let samples = vec![sample(ts(1, 0), ts(1, 1), 1.0), sample(ts(1, 2), ts(1, 3), 2.0)];
        let strata = stratify(&samples, &[]).unwrap();
        assert_eq!(strata.len(), 1);
        assert_eq!(strata[0].impact, ImpactClass::None);
        assert_eq!(strata[0].samples, 2);
    }

    #[test]
    fn strongest_overlapping_event_wins_and_strata_partition() {
        let samples = vec![
            sample(ts(1, 0), ts(1, 1), 1.0),
            sample(ts(1, 2), ts(1, 3), 2.0),
            sample(ts(1, 4), ts(1, 5), 3.0),
            sample(ts(1, 6), ts(1, 7), 4.0),
        ];
        let events = vec![
            EventRecord::new(0, ts(1, 2), ts(1, 3), ImpactClass::Minor, "lane closure".into()),
            EventRecord::new(1, ts(1, 2), ts(1, 3), ImpactClass::High, "major accident".into()),
            EventRecord::new(0, ts(1, 4), ts(1, 5), ImpactClass::Moderate, "heavy rain".into()),
            // Touching boundary only: half-open windows do not overlap.
            EventRecord::new(0, ts(1, 7), ts(1, 8), ImpactClass::High, "stadium event".into()),
        ];
        let strata = stratify(&samples, &events).unwrap();
        let by_class: Vec<(ImpactClass, usize)> =
            strata.iter().map(|s| (s.impact, s.samples)).collect();
        assert_eq!(
            by_class,
            vec![
                (ImpactClass::None, 2),
                (ImpactClass::Moderate, 1),
                (ImpactClass::High, 1),
            ]
        );
        let total: usize = strata.iter().map(|s| s.report.count).sum();
        assert_eq!(total, 4 * 2 * 3);
        let high = strata.iter().find(|s| s.impact == ImpactClass::High).unwrap();
        assert!((high.report.mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let y = m(1, 2, vec![2.0, 2.0]);
        let y_hat = m(1, 2, vec![3.0, 4.0]);
        let r = compute(&y, &y_hat, &ones(1, 2)).unwrap();
        let csv = to_csv(&[("High".into(), r)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("stratum,horizon,mae,rmse,mape,count"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("High,average,1.5,"));
        assert!(row.ends_with(",75,2"));
    }
}

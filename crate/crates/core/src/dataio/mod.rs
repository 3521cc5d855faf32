//! Series loading, normalisation, rolling windows, calendar stamps and the
//! ADF drift statistic.

mod adf;
mod calendar;
mod scaler;
pub mod synthetic;
mod windows;

use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use tcvae_numerics::Tensor;

use crate::error::{io_err, CoreError, Result};

pub use adf::{adf_design, adf_lag_order, adf_statistic, adf_statistic_with_lag};
pub use calendar::{check_stamp, stamp_features, stamp_of, Stamp, STAMP_CARDINALITIES, STAMP_TYPES};
pub use scaler::{fit_normalize, Scaler};
pub use windows::{make_windows, make_windows_for, WindowBatch};

/// A regularly sampled multivariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// `[T, d_x]`.
    pub values: Tensor<f64>,
    pub timestamps: Vec<NaiveDateTime>,
    pub variable_names: Vec<String>,
}

impl RawSeries {
    pub fn new(values: Tensor<f64>, timestamps: Vec<NaiveDateTime>, variable_names: Vec<String>) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] != timestamps.len() || shape[1] != variable_names.len() {
            return Err(CoreError::Csv(format!(
                "values {:?} do not match {} timestamps and {} names",
                shape,
                timestamps.len(),
                variable_names.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(CoreError::TooShort {
                rows: timestamps.len(),
                needed: 2,
            });
        }
        check_spacing(&timestamps, 0)?;
        Ok(Self {
            values,
            timestamps,
            variable_names,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.variable_names.len()
    }

    pub fn interval(&self) -> TimeDelta {
        self.timestamps[1] - self.timestamps[0]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        self.values.data().iter().skip(j).step_by(d).copied().collect()
    }

    /// Rows `start..end`. The result may have fewer than two rows, so it is
    /// not re-validated.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let d = self.dim();
        let data = self.values.data()[start * d..end * d].to_vec();
        RawSeries {
            values: Tensor::new(&[end - start, d], data).expect("slice shape"),
            timestamps: self.timestamps[start..end].to_vec(),
            variable_names: self.variable_names.clone(),
        }
    }

    /// Same timestamps and names with new values of identical shape.
    pub fn with_values(&self, values: Tensor<f64>) -> RawSeries {
        debug_assert_eq!(values.shape(), self.values.shape());
        RawSeries {
            values,
            timestamps: self.timestamps.clone(),
            variable_names: self.variable_names.clone(),
        }
    }
}

/// Chronological train/validation/test partition.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

/// Splits by `ratios` (normalised to sum 1), in time order.
pub fn split_series(series: &RawSeries, ratios: [f64; 3]) -> Result<Split> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || !(total > 0.0) {
        return Err(CoreError::Config(format!("invalid split ratios {ratios:?}")));
    }
    let n = series.len();
    let n_train = ((ratios[0] / total) * n as f64).round() as usize;
    let n_val = ((ratios[1] / total) * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok(Split {
        train: series.slice(0, n_train),
        val: series.slice(n_train, n_train + n_val),
        test: series.slice(n_train + n_val, n),
    })
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_csv(file)
}

/// Parses CSV text: a header, an ISO-8601 timestamp column, then numeric
/// columns.
pub fn read_csv(reader: impl Read) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CoreError::Csv(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(CoreError::Csv("need a timestamp column and at least one variable".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CoreError::Csv(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(CoreError::Csv(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let ts = parse_instant(&rec[0]).ok_or_else(|| CoreError::BadTimestamp {
            line,
            value: rec[0].to_string(),
        })?;
        stamps.push(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let column = || names[j].clone();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                return Err(CoreError::MissingValue { line, column: column() });
            }
            let v: f64 = cell.parse().map_err(|_| CoreError::NonNumeric {
                line,
                column: column(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(CoreError::MissingValue { line, column: column() });
            }
            values.push(v);
        }
    }
    if stamps.len() < 2 {
        return Err(CoreError::TooShort {
            rows: stamps.len(),
            needed: 2,
        });
    }
    check_spacing(&stamps, 2)?;
    let t = stamps.len();
    let values = Tensor::new(&[t, names.len()], values)?;
    Ok(RawSeries {
        values,
        timestamps: stamps,
        variable_names: names,
    })
}

pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Csv(e.to_string()))?;
    let csv_err = |e: csv::Error| CoreError::Csv(e.to_string());
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.variable_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (t, ts) in series.timestamps.iter().enumerate() {
        let mut row = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
        row.extend(series.values.row(t).iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Accepts `YYYY-MM-DD[( |T)HH:MM[:SS[.fff]]]`.
pub fn parse_instant(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().map(|d| d.and_hms_opt(0, 0, 0).unwrap()))
}

fn check_spacing(stamps: &[NaiveDateTime], line_offset: usize) -> Result<()> {
    let step = stamps[1] - stamps[0];
    for (i, pair) in stamps.windows(2).enumerate() {
        let delta = pair[1] - pair[0];
        let line = i + 1 + line_offset;
        if delta <= TimeDelta::zero() {
            return Err(CoreError::NonMonotone { line });
        }
        if delta != step {
            return Err(CoreError::IrregularInterval {
                line,
                found: delta.num_seconds(),
                expected: step.num_seconds(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(text: &str) -> Result<RawSeries> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn three_rows_two_vars() {
        let s = csv("timestamp,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\n2020-01-01 02:00,5,6\n").unwrap();
        assert_eq!(s.values.shape(), &[3, 2]);
        assert_eq!(s.column(1), vec![2.0, 4.0, 6.0]);
        assert_eq!(s.interval(), TimeDelta::hours(1));
    }

    #[test]
    fn crlf_and_iso_t() {
        let s = csv("timestamp,a\r\n2020-01-01T00:00:00,1\r\n2020-01-01T00:15:00,2\r\n").unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn gap_is_irregular() {
        let e = csv("timestamp,a\n2020-01-01 00:00,1\n2020-01-01 01:00,1\n2020-01-01 03:00,1\n").unwrap_err();
        assert!(matches!(e, CoreError::IrregularInterval { found: 7200, expected: 3600, .. }), "{e}");
    }

    #[test]
    fn nan_is_missing() {
        let e = csv("timestamp,a\n2020-01-01 00:00,NaN\n2020-01-01 01:00,1\n").unwrap_err();
        assert!(matches!(e, CoreError::MissingValue { line: 2, .. }), "{e}");
        let e = csv("timestamp,a,b\n2020-01-01 00:00,1,\n2020-01-01 01:00,1,2\n").unwrap_err();
        assert!(matches!(e, CoreError::MissingValue { .. }), "{e}");
    }

    #[test]
    fn other_errors() {
        assert!(matches!(
            csv("timestamp,a\n2020-01-01 00:00,x\n2020-01-01 01:00,1\n").unwrap_err(),
            CoreError::NonNumeric { .. }
        ));
        assert!(matches!(
            csv("timestamp,a\n2020-01-01 00:00,1\n").unwrap_err(),
            CoreError::TooShort { rows: 1, .. }
        ));
        assert!(matches!(
            csv("timestamp,a\n2020-01-01 01:00,1\n2020-01-01 00:00,1\n").unwrap_err(),
            CoreError::NonMonotone { .. }
        ));
        assert!(matches!(
            csv("timestamp,a\nyesterday,1\n2020-01-01 00:00,1\n").unwrap_err(),
            CoreError::BadTimestamp { .. }
        ));
    }

    #[test]
    fn split_is_chronological() {
        let s = synthetic::sine_series(100, 2, 24.0, 0.0, 1);
        let sp = split_series(&s, DEFAULT_SPLIT).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (70, 10, 20));
        assert_eq!(sp.val.timestamps[0], s.timestamps[70]);
        assert_eq!(sp.test.values.row(0), s.values.row(80));
    }

    #[test]
    fn csv_round_trip() {
        let s = synthetic::sine_series(30, 3, 24.0, 0.1, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_csv(&s, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), s);
    }
}

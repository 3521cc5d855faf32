//! Forecast metrics, rolling evaluation and sanity baselines.

use serde::{Deserialize, Serialize};
use tcvae_numerics::{Real, Tensor};

use crate::dataio::{make_windows_for, RawSeries, Scaler, WindowBatch};
use crate::error::{CoreError, Result};
use crate::latent::Draw;
use crate::model::Tcvae;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// `(1/N) Σ |y − ŷ| / |y|` over points with `y ≠ 0`; zero targets add 0.
    pub mape: f64,
    pub count: usize,
    /// Points whose target is exactly zero.
    pub zero_targets: usize,
}

impl MetricReport {
    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        format!(
            "mae={}\nrmse={}\nmape={}\ncount={}\nzero_targets={}\n",
            self.mae, self.rmse, self.mape, self.count, self.zero_targets
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serialises")
    }
}

/// MAE, RMSE and MAPE over paired points.
pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<MetricReport> {
    if predictions.len() != targets.len() {
        return Err(CoreError::OutOfRange(
            "metrics",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    let n = targets.len();
    if n == 0 {
        return Ok(MetricReport::default());
    }
    let (mut abs, mut sq, mut pct, mut zeros) = (0.0, 0.0, 0.0, 0);
    for (&p, &y) in predictions.iter().zip(targets) {
        let e = (y - p).abs();
        abs += e;
        sq += e * e;
        if y == 0.0 {
            zeros += 1;
        } else {
            pct += e / y.abs();
        }
    }
    let nf = n as f64;
    Ok(MetricReport {
        mae: abs / nf,
        rmse: (sq / nf).sqrt(),
        mape: pct / nf,
        count: n,
        zero_targets: zeros,
    })
}

pub fn compute_metrics_tensor(predictions: &Tensor<f64>, targets: &Tensor<f64>) -> Result<MetricReport> {
    if predictions.shape() != targets.shape() {
        return Err(CoreError::OutOfRange(
            "metrics",
            format!("prediction shape {:?} vs target shape {:?}", predictions.shape(), targets.shape()),
        ));
    }
    compute_metrics(predictions.data(), targets.data())
}

/// Anything that maps windows to `[N, h, d_y]` forecasts in the windows' units.
pub trait Forecaster {
    fn forecast_windows(&self, windows: &WindowBatch, seed: u64) -> Result<Tensor<f64>>;
}

/// Every horizon step repeats the window's last observation.
pub fn persistence_baseline(window: &Tensor<f64>, h: usize) -> Result<Tensor<f64>> {
    let s = window.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(CoreError::OutOfRange("window", format!("shape {s:?}, expected non-empty [w, d_x]")));
    }
    let last = window.row(s[0] - 1);
    let data = (0..h).flat_map(|_| last.iter().copied()).collect();
    Ok(Tensor::new(&[h, s[1]], data)?)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast_windows(&self, windows: &WindowBatch, _seed: u64) -> Result<Tensor<f64>> {
        per_target(windows, |col| *col.last().expect("non-empty window"))
    }
}

/// Every horizon step is the window mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanBaseline;

impl Forecaster for MeanBaseline {
    fn forecast_windows(&self, windows: &WindowBatch, _seed: u64) -> Result<Tensor<f64>> {
        per_target(windows, |col| col.iter().sum::<f64>() / col.len() as f64)
    }
}

/// Constant-over-horizon forecasts from a statistic of each target column.
fn per_target(windows: &WindowBatch, stat: impl Fn(&[f64]) -> f64) -> Result<Tensor<f64>> {
    let (n, w, d, h) = (windows.len(), windows.window(), windows.input_dim(), windows.horizon());
    let cols = &windows.target_columns;
    let x = windows.inputs.data();
    let mut out = Vec::with_capacity(n * h * cols.len());
    let mut column = Vec::with_capacity(w);
    for i in 0..n {
        let values: Vec<f64> = cols
            .iter()
            .map(|&c| {
                column.clear();
                column.extend((0..w).map(|t| x[(i * w + t) * d + c]));
                stat(&column)
            })
            .collect();
        for _ in 0..h {
            out.extend_from_slice(&values);
        }
    }
    Ok(Tensor::new(&[n, h, cols.len()], out)?)
}

/// A trained model used as a [`Forecaster`]. `mean_latent` replaces the
/// sampled latent by the posterior mean.
pub struct ModelForecaster<'a, T: Real> {
    pub model: &'a Tcvae<T>,
    pub mean_latent: bool,
}

impl<T: Real> Forecaster for ModelForecaster<'_, T> {
    fn forecast_windows(&self, windows: &WindowBatch, seed: u64) -> Result<Tensor<f64>> {
        let draw = if self.mean_latent { Draw::Mean } else { Draw::Sample(seed) };
        self.model.predict(windows, draw)
    }
}

/// One evaluated window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    /// Row of the window's first input step.
    pub start: usize,
    /// `h · d_y` values, step-major.
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingEvaluation {
    pub report: MetricReport,
    pub windows: Vec<WindowTrace>,
}

/// Units in which metrics are computed.
#[derive(Clone, Copy, Debug)]
pub enum Units<'a> {
    /// The units of the series handed in.
    AsGiven,
    /// Inverse-transform predictions and targets with the scaler first.
    Raw(&'a Scaler),
}

/// Forecasts every window of `series` at step 1 and aggregates the metrics
/// over all (window, horizon step, variable) points.
pub fn rolling_evaluate(
    model: &dyn Forecaster,
    series: &RawSeries,
    w: usize,
    h: usize,
    targets: &[usize],
    seed: u64,
    units: Units<'_>,
) -> Result<RollingEvaluation> {
    let windows = make_windows_for(series, w, h, targets)?;
    let mut pred = model.forecast_windows(&windows, seed)?;
    let mut truth = windows.targets.clone();
    if pred.shape() != truth.shape() {
        return Err(CoreError::OutOfRange(
            "forecast",
            format!("shape {:?}, expected {:?}", pred.shape(), truth.shape()),
        ));
    }
    if let Units::Raw(scaler) = units {
        pred = scaler.inverse_columns(&pred, targets);
        truth = scaler.inverse_columns(&truth, targets);
    }
    let report = compute_metrics_tensor(&pred, &truth)?;
    let per = h * targets.len();
    let traces = windows
        .starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let p = pred.data()[i * per..(i + 1) * per].to_vec();
            let t = truth.data()[i * per..(i + 1) * per].to_vec();
            let report = compute_metrics(&p, &t)?;
            Ok(WindowTrace {
                start,
                predictions: p,
                targets: t,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RollingEvaluation { report, windows: traces })
}

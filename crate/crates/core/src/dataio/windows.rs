use tcvae_numerics::Tensor;

use super::calendar::{stamp_of, Stamp};
use super::RawSeries;
use crate::error::{CoreError, Result};

/// Rolling input/target windows with their calendar stamps.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[N, w, d_x]`.
    pub inputs: Tensor<f64>,
    /// `[N, h, d_y]`.
    pub targets: Tensor<f64>,
    /// `N · w` stamps, window-major.
    pub input_stamps: Vec<Stamp>,
    /// `N · h` stamps, window-major.
    pub target_stamps: Vec<Stamp>,
    /// Source columns of the target variables.
    pub target_columns: Vec<usize>,
    /// Row index of each window's first input step.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn output_dim(&self) -> usize {
        self.targets.shape()[2]
    }

    /// Sub-batch of the given windows, in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (w, h) = (self.window(), self.horizon());
        WindowBatch {
            inputs: take_rows(&self.inputs, idx),
            targets: take_rows(&self.targets, idx),
            input_stamps: idx.iter().flat_map(|&i| self.input_stamps[i * w..(i + 1) * w].iter().copied()).collect(),
            target_stamps: idx.iter().flat_map(|&i| self.target_stamps[i * h..(i + 1) * h].iter().copied()).collect(),
            target_columns: self.target_columns.clone(),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
        }
    }
}

fn take_rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let shape = t.shape();
    let stride: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = idx.len();
    Tensor::new(&out_shape, data).expect("row gather")
}

/// All windows, forecasting every variable.
pub fn make_windows(series: &RawSeries, w: usize, h: usize) -> Result<WindowBatch> {
    let cols: Vec<usize> = (0..series.dim()).collect();
    make_windows_for(series, w, h, &cols)
}

/// All `T − w − h + 1` windows with step 1, forecasting columns `targets`.
pub fn make_windows_for(series: &RawSeries, w: usize, h: usize, targets: &[usize]) -> Result<WindowBatch> {
    let t_len = series.len();
    let d = series.dim();
    if w == 0 || h == 0 {
        return Err(CoreError::OutOfRange("window", format!("w = {w}, h = {h} must be positive")));
    }
    if w + h > t_len {
        return Err(CoreError::TooShort {
            rows: t_len,
            needed: w + h,
        });
    }
    if targets.is_empty() || targets.iter().any(|&c| c >= d) {
        return Err(CoreError::OutOfRange("target columns", format!("{targets:?} for {d} variables")));
    }
    let n = t_len - w - h + 1;
    let stamps: Vec<Stamp> = series.timestamps.iter().map(stamp_of).collect();
    let vals = series.values.data();
    let mut inputs = Vec::with_capacity(n * w * d);
    let mut outs = Vec::with_capacity(n * h * targets.len());
    let mut input_stamps = Vec::with_capacity(n * w);
    let mut target_stamps = Vec::with_capacity(n * h);
    for s in 0..n {
        inputs.extend_from_slice(&vals[s * d..(s + w) * d]);
        for t in s + w..s + w + h {
            outs.extend(targets.iter().map(|&c| vals[t * d + c]));
        }
        input_stamps.extend_from_slice(&stamps[s..s + w]);
        target_stamps.extend_from_slice(&stamps[s + w..s + w + h]);
    }
    Ok(WindowBatch {
        inputs: Tensor::new(&[n, w, d], inputs)?,
        targets: Tensor::new(&[n, h, targets.len()], outs)?,
        input_stamps,
        target_stamps,
        target_columns: targets.to_vec(),
        starts: (0..n).collect(),
    })
}

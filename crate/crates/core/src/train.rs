//! Minibatch training with Adam and dataset preparation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tcvae_numerics::{mix_seed, sampling, Adam, Graph, Real};

use crate::dataio::{make_windows_for, split_series, RawSeries, Scaler, WindowBatch};
use crate::error::{CoreError, Result};
use crate::model::{Batch, ForwardOptions, Tcvae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer steps for one pass over `windows` windows.
pub fn steps_per_epoch(windows: usize, batch_size: usize) -> usize {
    windows.div_ceil(batch_size.max(1))
}

/// Window-weighted mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub forecasting: f64,
    pub kl: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
}

impl FitReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

#[derive(Default)]
struct Sums {
    loss: f64,
    reconstruction: f64,
    forecasting: f64,
    kl: f64,
    windows: usize,
}

impl Sums {
    fn mean(&self, v: f64) -> f64 {
        v / self.windows.max(1) as f64
    }
}

/// Seed of the noise drawn at one step; distinct from the shuffle stream.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64), step as u64 + 1)
}

impl<T: Real> Tcvae<T> {
    /// Trains on `train` for `cfg.epochs` epochs, reporting each epoch to
    /// `on_epoch` as it completes. Windows are reshuffled every epoch from
    /// the seed, so identical inputs reproduce identical parameters.
    pub fn fit(
        &mut self,
        train: &WindowBatch,
        val: Option<&WindowBatch>,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitReport> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(CoreError::Config("no training windows".into()));
        }
        let token_len = self.config().token_len;
        let mut adam = Adam::new(T::lit(cfg.lr));
        let mut report = FitReport::default();
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut sampling::rng(mix_seed(cfg.seed, epoch as u64)));
            let mut sums = Sums::default();
            let mut steps = 0;
            for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch = Batch::<T>::from_windows(&train.select(idx), token_len)?;
                let mut g = Graph::new();
                let out = self.forward(&mut g, &batch, ForwardOptions::train(step_seed(cfg.seed, epoch, step)))?;
                let terms = out.loss.expect("training forward builds the loss");
                let value = |v| g.scalar_value(v).map(|x: T| x.to_f64().unwrap_or(f64::NAN));
                let loss = value(terms.total)?;
                if !loss.is_finite() {
                    let detail = match g.check_finite() {
                        Err(e) => e.to_string(),
                        Ok(()) => format!("loss {loss}"),
                    };
                    return Err(CoreError::Diverged { epoch, batch: step, detail });
                }
                let n = idx.len() as f64;
                sums.loss += n * loss;
                sums.forecasting += n * value(terms.forecasting)?;
                if let Some(r) = terms.reconstruction {
                    sums.reconstruction += n * value(r)?;
                }
                if let Some(k) = terms.kl {
                    sums.kl += n * value(k)?;
                }
                sums.windows += idx.len();
                let grads = g.backward(terms.total)?;
                self.params.zero_grad();
                self.params.accumulate(&grads);
                adam.step(&mut self.params);
                steps += 1;
            }
            let val_loss = match val {
                Some(v) if !v.is_empty() => Some(self.evaluate_loss(v, cfg.batch_size, mix_seed(cfg.seed, u64::MAX))?),
                _ => None,
            };
            let record = EpochRecord {
                epoch,
                steps,
                loss: sums.mean(sums.loss),
                reconstruction: sums.mean(sums.reconstruction),
                forecasting: sums.mean(sums.forecasting),
                kl: sums.mean(sums.kl),
                val_loss,
            };
            on_epoch(&record);
            report.epochs.push(record);
        }
        Ok(report)
    }

    /// Window-weighted mean training loss over `windows`, without updates.
    pub fn evaluate_loss(&self, windows: &WindowBatch, batch_size: usize, seed: u64) -> Result<f64> {
        let token_len = self.config().token_len;
        let mut total = 0.0;
        let all: Vec<usize> = (0..windows.len()).collect();
        for (i, idx) in all.chunks(batch_size.max(1)).enumerate() {
            let batch = Batch::<T>::from_windows(&windows.select(idx), token_len)?;
            let mut g = Graph::new();
            let out = self.forward(&mut g, &batch, ForwardOptions::train(mix_seed(seed, i as u64)))?;
            let loss = g.scalar_value(out.loss.expect("loss requested").total)?;
            total += idx.len() as f64 * loss.to_f64().unwrap_or(f64::NAN);
        }
        Ok(total / windows.len().max(1) as f64)
    }
}

/// Normalised splits and their windows.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Fitted on the training split only.
    pub scaler: Scaler,
    pub train_series: RawSeries,
    pub val_series: RawSeries,
    pub test_series: RawSeries,
    pub train: WindowBatch,
    /// Empty when the validation split is shorter than `w + h`.
    pub val: Option<WindowBatch>,
    pub test: WindowBatch,
}

impl Dataset {
    /// Splits `series` chronologically, fits the scaler on the training part,
    /// normalises every part and cuts rolling windows.
    pub fn prepare(series: &RawSeries, ratios: [f64; 3], w: usize, h: usize, targets: &[usize]) -> Result<Self> {
        let split = split_series(series, ratios)?;
        let scaler = Scaler::fit(&split.train)?;
        let train_series = scaler.transform(&split.train);
        let val_series = scaler.transform(&split.val);
        let test_series = scaler.transform(&split.test);
        let train = make_windows_for(&train_series, w, h, targets)?;
        let val = if val_series.len() >= w + h {
            Some(make_windows_for(&val_series, w, h, targets)?)
        } else {
            None
        };
        let test = make_windows_for(&test_series, w, h, targets)?;
        Ok(Self {
            scaler,
            train_series,
            val_series,
            test_series,
            train,
            val,
            test,
        })
    }
}

//! Deterministic synthetic series for tests, demos and smoke runs.

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use tcvae_numerics::{standard_normal, Tensor};

use super::RawSeries;

fn start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2018, 9, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn hourly(t: usize) -> Vec<NaiveDateTime> {
    (0..t).map(|i| start() + TimeDelta::hours(i as i64)).collect()
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("v{j}")).collect()
}

/// Hourly series from row-major `values` with `d` variables.
pub fn hourly_series(values: &[f64], d: usize) -> RawSeries {
    let t = values.len() / d;
    RawSeries {
        values: Tensor::new(&[t, d], values.to_vec()).expect("row-major values"),
        timestamps: hourly(t),
        variable_names: names(d),
    }
}

pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    standard_normal::<f64>(&[len], seed).into_data()
}

pub fn random_walk(len: usize, seed: u64) -> Vec<f64> {
    cumsum(&white_noise(len, seed))
}

pub fn cumsum(x: &[f64]) -> Vec<f64> {
    x.iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// Phase-shifted sinusoids plus iid noise of scale `noise`.
pub fn sine_series(t: usize, d: usize, period: f64, noise: f64, seed: u64) -> RawSeries {
    let eta = standard_normal::<f64>(&[t, d], seed);
    let mut v = Vec::with_capacity(t * d);
    for i in 0..t {
        for j in 0..d {
            let phase = j as f64 * 0.7;
            let amp = 1.0 + 0.25 * j as f64;
            v.push(amp * (std::f64::consts::TAU * i as f64 / period + phase).sin() + noise * eta.at(&[i, j]));
        }
    }
    hourly_series(&v, d)
}

/// Daily-periodic sinusoids with AR(1) noise and a level shift every
/// `shift_every` steps, so that the marginal distribution drifts over time.
pub fn drifting_series(t: usize, d: usize, shift_every: usize, seed: u64) -> RawSeries {
    const PHI: f64 = 0.5;
    const SIGMA: f64 = 0.1;
    let eta = standard_normal::<f64>(&[t, d], seed);
    let segments = t.div_ceil(shift_every.max(1));
    let levels = standard_normal::<f64>(&[segments, d], seed ^ 0x5eed);
    let mut ar = vec![0.0; d];
    let mut v = Vec::with_capacity(t * d);
    for i in 0..t {
        let seg = i / shift_every.max(1);
        for j in 0..d {
            ar[j] = PHI * ar[j] + SIGMA * eta.at(&[i, j]);
            let amp = 1.0 + 0.3 * j as f64;
            let phase = 0.9 * j as f64;
            let season = amp * (std::f64::consts::TAU * i as f64 / 24.0 + phase).sin();
            v.push(season + levels.at(&[seg, j]) + ar[j]);
        }
    }
    hourly_series(&v, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let a = drifting_series(2000, 3, 400, 7);
        assert_eq!(a.values.shape(), &[2000, 3]);
        assert_eq!(a, drifting_series(2000, 3, 400, 7));
        assert_ne!(a, drifting_series(2000, 3, 400, 8));
        assert_eq!(random_walk(3, 1)[2], white_noise(3, 1).iter().sum::<f64>());
    }
}

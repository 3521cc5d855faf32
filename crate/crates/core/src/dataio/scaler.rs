use serde::{Deserialize, Serialize};
use tcvae_numerics::Tensor;

use super::RawSeries;
use crate::error::{CoreError, Result};

/// Per-variable min-max scaling with offset `|min|` added to the range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &RawSeries) -> Result<Self> {
        let d = series.dim();
        if series.is_empty() {
            return Err(CoreError::TooShort { rows: 0, needed: 1 });
        }
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for t in 0..series.len() {
            for (j, &v) in series.values.row(t).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let offset: Vec<f64> = min.iter().map(|m| m.abs()).collect();
        let s = Self { min, max, offset };
        for j in 0..d {
            if s.denominator(j) <= 0.0 {
                return Err(CoreError::ZeroScale(j));
            }
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn denominator(&self, j: usize) -> f64 {
        self.max[j] - self.min[j] + self.offset[j]
    }

    /// Scales a `[.., d]` array whose last axis holds variables `cols`.
    pub fn normalize_columns(&self, values: &Tensor<f64>, cols: &[usize]) -> Tensor<f64> {
        self.apply(values, cols, |x, j| (x - self.min[j]) / self.denominator(j))
    }

    pub fn inverse_columns(&self, values: &Tensor<f64>, cols: &[usize]) -> Tensor<f64> {
        self.apply(values, cols, |x, j| x * self.denominator(j) + self.min[j])
    }

    pub fn normalize(&self, values: &Tensor<f64>) -> Tensor<f64> {
        self.normalize_columns(values, &(0..self.dim()).collect::<Vec<_>>())
    }

    pub fn inverse(&self, values: &Tensor<f64>) -> Tensor<f64> {
        self.inverse_columns(values, &(0..self.dim()).collect::<Vec<_>>())
    }

    pub fn transform(&self, series: &RawSeries) -> RawSeries {
        series.with_values(self.normalize(&series.values))
    }

    fn apply(&self, values: &Tensor<f64>, cols: &[usize], f: impl Fn(f64, usize) -> f64) -> Tensor<f64> {
        let width = cols.len();
        assert_eq!(values.shape().last(), Some(&width), "last axis must match column list");
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, cols[i % width]))
            .collect();
        Tensor::new(values.shape(), data).expect("same shape")
    }
}

/// Fits a scaler on `series` and returns the scaled series with it.
pub fn fit_normalize(series: &RawSeries) -> Result<(RawSeries, Scaler)> {
    let scaler = Scaler::fit(series)?;
    Ok((scaler.transform(series), scaler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::hourly_series;

    #[test]
    fn hand_values() {
        let s = hourly_series(&[0.0, 5.0, 10.0, 3.0, 3.0, 3.0], 2);
        let (n, sc) = fit_normalize(&s).unwrap();
        assert_eq!(sc.offset, vec![0.0, 3.0]);
        // column 0: 0, 10, 3 ; column 1: 5, 3, 3
        assert_eq!(n.values.at(&[1, 0]), 1.0);
        assert_eq!(n.values.at(&[2, 0]), 0.3);
        let c = hourly_series(&[3.0, 3.0, 3.0], 1);
        let (n, sc) = fit_normalize(&c).unwrap();
        assert_eq!(sc.offset, vec![3.0]);
        assert!(n.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint() {
        let s = hourly_series(&[0.0, 10.0, 5.0], 1);
        let (n, _) = fit_normalize(&s).unwrap();
        assert_eq!(n.values.at(&[2, 0]), 0.5);
    }

    #[test]
    fn all_zero_is_an_error() {
        let s = hourly_series(&[1.0, 0.0, 2.0, 0.0], 2);
        assert!(matches!(fit_normalize(&s), Err(CoreError::ZeroScale(1))));
    }

    #[test]
    fn negative_minimum_offset() {
        let s = hourly_series(&[-4.0, 0.0, 2.0], 1);
        let (n, sc) = fit_normalize(&s).unwrap();
        assert_eq!(sc.denominator(0), 10.0);
        assert_eq!(n.values.data(), &[0.0, 0.4, 0.6]);
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

pub const ADF_MIN_LEN: usize = 20;

/// Default lag order `⌊(L − 1)^{1/3}⌋`.
pub fn adf_lag_order(len: usize) -> usize {
    let n = len.saturating_sub(1) as f64;
    let mut p = n.cbrt().floor() as usize;
    // cbrt can land just below an exact cube
    while ((p + 1) as f64).powi(3) <= n {
        p += 1;
    }
    p
}

/// ADF t-statistic with constant and trend at the default lag order.
pub fn adf_statistic(x: &[f64]) -> Result<f64> {
    adf_statistic_with_lag(x, adf_lag_order(x.len()))
}

/// t-statistic of `ρ` in
/// `Δx_t = α + β·t + ρ·x_{t−1} + Σ_{j=1..p} φ_j·Δx_{t−j} + e_t`.
pub fn adf_statistic_with_lag(x: &[f64], p: usize) -> Result<f64> {
    if x.len() < ADF_MIN_LEN {
        return Err(CoreError::TooShort {
            rows: x.len(),
            needed: ADF_MIN_LEN,
        });
    }
    let (design, y) = adf_design(x, p);
    let (n, m) = design.shape();
    if n <= m {
        return Err(CoreError::TooShort {
            rows: x.len(),
            needed: x.len() + m + 1 - n,
        });
    }
    let xtx = design.transpose() * &design;
    let chol = xtx.cholesky().ok_or(CoreError::Singular)?;
    let beta = chol.solve(&(design.transpose() * &y));
    let resid = &y - &design * &beta;
    let s2 = resid.norm_squared() / (n - m) as f64;
    let inv = chol.inverse();
    let var_rho = s2 * inv[(2, 2)];
    if !(var_rho > 0.0) || !var_rho.is_finite() {
        return Err(CoreError::Singular);
    }
    Ok(beta[2] / var_rho.sqrt())
}

/// Regressor matrix with columns `[1, t, x_{t−1}, Δx_{t−1}, …, Δx_{t−p}]`
/// and the response `Δx_t`, for `t = p + 1 … L − 1`.
pub fn adf_design(x: &[f64], p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let rows: Vec<usize> = (p + 1..x.len()).collect();
    let m = 3 + p;
    let design = DMatrix::from_fn(rows.len(), m, |r, c| {
        let t = rows[r];
        match c {
            0 => 1.0,
            1 => t as f64,
            2 => x[t - 1],
            _ => dx[t - 1 - (c - 2)],
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&t| dx[t - 1]));
    (design, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_order() {
        assert_eq!(adf_lag_order(1000), 9);
        assert_eq!(adf_lag_order(1001), 10);
        assert_eq!(adf_lag_order(28), 3);
        assert_eq!(adf_lag_order(20), 2);
    }

    #[test]
    fn too_short_and_singular() {
        assert!(matches!(adf_statistic(&[1.0; 10]), Err(CoreError::TooShort { .. })));
        assert!(matches!(adf_statistic(&[1.0; 40]), Err(CoreError::Singular)));
    }
}

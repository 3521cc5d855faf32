//! Temporal Hawkes attention over the token stream and the hand-built
//! statistic rows that summarise it.

use tcvae_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::Builder;

/// Statistic rows: sta, end, max, min, med, mean, std, std(mean), std(std).
pub const NUM_FACTORS: usize = 9;

pub const EXCITATION_INIT: f64 = 0.1;
pub const DECAY_INIT: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct HawkesParams {
    /// `[d, d]` score matrix.
    pub w: ParamId,
    /// Excitation `ε`, `[1]`.
    pub excitation: ParamId,
    /// Unconstrained decay; the effective decay is `softplus` of it.
    pub decay_raw: ParamId,
}

/// Intermediate values of one factor extraction, all `[B, …]`.
#[derive(Clone, Copy, Debug)]
pub struct FactorTrace {
    /// `[B, L, 1]`.
    pub alpha: Var,
    pub zeta: Var,
    pub modulated: Var,
    /// `[B, 9, d]`.
    pub factors: Var,
}

impl HawkesParams {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize) -> Result<Self> {
        let w = bld.xavier(&format!("{name}.w"), &[d, d], d, d)?;
        let excitation = bld.full(&format!("{name}.excitation"), &[1], EXCITATION_INIT)?;
        let decay_raw = bld.full(&format!("{name}.decay"), &[1], inverse_softplus(DECAY_INIT))?;
        Ok(Self { w, excitation, decay_raw })
    }

    /// Attention, optional Hawkes modulation, then factor extraction.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: Var, hawkes: bool) -> Result<FactorTrace> {
        let w = g.param(store, self.w);
        let (alpha, zeta) = temporal_attention(g, u, w)?;
        let modulated = if hawkes {
            let eps = g.param(store, self.excitation);
            let raw = g.param(store, self.decay_raw);
            let gamma = g.softplus(raw);
            let l = g.shape(u)[1];
            hawkes_modulate(g, zeta, &elapsed(l), eps, gamma)?
        } else {
            zeta
        };
        let factors = extract_factors(g, modulated)?;
        Ok(FactorTrace {
            alpha,
            zeta,
            modulated,
            factors,
        })
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Steps elapsed since each position of a length-`l` window: `l − 1 − τ`.
pub fn elapsed(l: usize) -> Vec<f64> {
    (0..l).rev().map(|v| v as f64).collect()
}

/// Softmax attention over time of `u` (`[B, L, d]`) with score
/// `u_τᵀ W ū`, `ū` the time-mean of `u`. Returns `α` (`[B, L, 1]`) and
/// `ζ = α ⊙ u`.
pub fn temporal_attention<T: Real>(g: &mut Graph<T>, u: Var, w: Var) -> Result<(Var, Var)> {
    let shape = g.shape(u).to_vec();
    let (b, l) = (shape[0], shape[1]);
    let ubar = g.mean_axis(u, 1)?;
    let uw = g.matmul(u, w)?;
    let prod = g.mul(uw, ubar)?;
    let score = g.sum_axis(prod, 2)?;
    let score = g.reshape(score, &[b, 1, l])?;
    let alpha = g.softmax(score)?;
    let alpha = g.reshape(alpha, &[b, l, 1])?;
    let zeta = g.mul(u, alpha)?;
    Ok((alpha, zeta))
}

/// `B_τ = ζ_τ + ε · max(ζ_τ, 0) · exp(−γ Δt_τ)` row-wise, with `ε` and `γ`
/// of shape `[1]`.
pub fn hawkes_modulate<T: Real>(g: &mut Graph<T>, zeta: Var, dt: &[f64], eps: Var, gamma: Var) -> Result<Var> {
    let l = g.shape(zeta)[1];
    if dt.len() != l {
        return Err(CoreError::OutOfRange("elapsed times", format!("{} for {l} steps", dt.len())));
    }
    if let Some(bad) = dt.iter().find(|v| !(**v >= 0.0)) {
        return Err(CoreError::OutOfRange("elapsed time", format!("{bad} is negative")));
    }
    let dt = g.constant(Tensor::new(&[l, 1], dt.iter().map(|&v| T::lit(v)).collect())?);
    let rate = g.mul(gamma, dt)?;
    let rate = g.neg(rate);
    let decay = g.exp(rate);
    let pos = g.relu(zeta);
    let excite = g.mul(pos, decay)?;
    let excite = g.mul(excite, eps)?;
    Ok(g.add(zeta, excite)?)
}

/// Nine statistic rows over time for each column of `b` (`[B, L, d]`);
/// returns `[B, 9, d]`.
pub fn extract_factors<T: Real>(g: &mut Graph<T>, b: Var) -> Result<Var> {
    let l = g.shape(b)[1];
    let sta = g.narrow(b, 1, 0, 1)?;
    let end = g.narrow(b, 1, l - 1, 1)?;
    let sorted = g.sort(b, 1)?;
    let max = g.narrow(sorted, 1, l - 1, 1)?;
    let min = g.narrow(sorted, 1, 0, 1)?;
    let med = if l % 2 == 1 {
        g.narrow(sorted, 1, l / 2, 1)?
    } else {
        let lo = g.narrow(sorted, 1, l / 2 - 1, 1)?;
        let hi = g.narrow(sorted, 1, l / 2, 1)?;
        let s = g.add(lo, hi)?;
        g.scale(s, T::lit(0.5))
    };
    let mu = g.mean_axis(b, 1)?;
    let std = population_std(g, b, mu, 1)?;
    let shape = g.shape(mu).to_vec();
    let mu_mean = g.mean_axis(mu, 2)?;
    let std_mu = population_std(g, mu, mu_mean, 2)?;
    let std_mu = g.expand(std_mu, &shape)?;
    let std_mean = g.mean_axis(std, 2)?;
    let std_std = population_std(g, std, std_mean, 2)?;
    let std_std = g.expand(std_std, &shape)?;
    Ok(g.concat(&[sta, end, max, min, med, mu, std, std_mu, std_std], 1)?)
}

fn population_std<T: Real>(g: &mut Graph<T>, x: Var, mean: Var, axis: usize) -> Result<Var> {
    let c = g.sub(x, mean)?;
    let sq = g.square(c);
    let var = g.mean_axis(sq, axis)?;
    Ok(g.sqrt(var))
}

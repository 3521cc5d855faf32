//! Temporal-conditional prior and posterior over the latent sequence, the
//! generators, the conditional continuous normalising flow and the
//! Monte-Carlo KL term.

use std::cell::RefCell;

use tcvae_numerics::{seeded_gaussian, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::embedding::position_table;
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Linear, TanhMlp};
use crate::temporal_factors::NUM_FACTORS;

pub const DEFAULT_FLOW_STEPS: usize = 20;

/// Diagonal Gaussian over `[B, w, k]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub logvar: Var,
}

/// One latent path: base draw, generated latent, flow output and the flow's
/// log-density change per batch element.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub params: GaussianParams,
    pub base: Var,
    pub latent: Var,
    pub transformed: Var,
    /// `[B]`; zero when no flow is applied.
    pub delta: Var,
}

/// Right-hand side of the flow ODE.
pub trait Dynamics<T: Real> {
    /// `dz/dt` at `(z, t)` and a trace term for this evaluation.
    fn eval(&self, g: &mut Graph<T>, z: Var, t: f64) -> Result<(Var, Var)>;

    /// `∫ tr(∂Ω/∂z) dt` per row (`[…, 1]`) from quadrature-weighted trace
    /// terms. The default treats each term as the per-row trace itself.
    fn integrate_trace(&self, g: &mut Graph<T>, terms: &[(Var, T)]) -> Result<Var> {
        Ok(g.lincomb(terms)?)
    }
}

/// Parameters of `Ω(z, t, c) = tanh(z W_z + c W_c + t w_t + b₁) W₂ + b₂`.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub wz: ParamId,
    pub wc: ParamId,
    pub wt: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FlowField {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, k: usize, cond: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            wz: bld.xavier(&format!("{name}.wz"), &[k, hidden], k, hidden)?,
            wc: bld.xavier(&format!("{name}.wc"), &[cond, hidden], cond, hidden)?,
            wt: bld.xavier(&format!("{name}.wt"), &[1, hidden], 1, hidden)?,
            b1: bld.full(&format!("{name}.b1"), &[hidden], 0.0)?,
            w2: bld.xavier(&format!("{name}.w2"), &[hidden, k], hidden, k)?,
            b2: bld.full(&format!("{name}.b2"), &[k], 0.0)?,
        })
    }

    /// Loads the parameters into `g` once and fixes the condition.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cond: Var) -> Result<BoundFlow> {
        let wz = g.param(store, self.wz);
        let wc = g.param(store, self.wc);
        let wt = g.param(store, self.wt);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let cond_term = g.matmul(cond, wc)?;
        let cond_term = g.add(cond_term, b1)?;
        // ∂Ω/∂z has trace Σ_h (1 − a_h²)·D_h with D_h = Σ_i W_z[i,h]·W₂[h,i]
        let w2t = g.transpose(w2)?;
        let prod = g.mul(wz, w2t)?;
        let diag = g.sum_axis(prod, 0)?;
        let diag = g.transpose(diag)?;
        Ok(BoundFlow {
            wz,
            wt,
            w2,
            b2,
            cond_term,
            diag,
            time_terms: RefCell::new(Vec::new()),
        })
    }
}

/// A [`FlowField`] whose parameters and condition live in one graph.
#[derive(Debug)]
pub struct BoundFlow {
    wz: Var,
    wt: Var,
    w2: Var,
    b2: Var,
    /// `c W_c + b₁`.
    cond_term: Var,
    /// `[hidden, 1]`.
    diag: Var,
    /// `c W_c + b₁ + t w_t` per evaluated time.
    time_terms: RefCell<Vec<(u64, Var)>>,
}

impl BoundFlow {
    fn time_term<T: Real>(&self, g: &mut Graph<T>, t: f64) -> Result<Var> {
        if let Some(&(_, v)) = self.time_terms.borrow().iter().find(|(bits, _)| *bits == t.to_bits()) {
            return Ok(v);
        }
        let tw = g.scale(self.wt, T::lit(t));
        let v = g.add(self.cond_term, tw)?;
        self.time_terms.borrow_mut().push((t.to_bits(), v));
        Ok(v)
    }
}

impl<T: Real> Dynamics<T> for BoundFlow {
    /// The trace term is `a²`, the squared hidden activation.
    fn eval(&self, g: &mut Graph<T>, z: Var, t: f64) -> Result<(Var, Var)> {
        let bias = self.time_term(g, t)?;
        let pre = g.matmul(z, self.wz)?;
        let pre = g.add(pre, bias)?;
        let a = g.tanh(pre);
        let dz = g.matmul(a, self.w2)?;
        let dz = g.add(dz, self.b2)?;
        Ok((dz, g.square(a)))
    }

    /// `Σ_i c_i·tr_i = (Σ_i c_i)·Σ_h D_h − [a₁² … a_N²]·[c₁D; …; c_N D]`.
    fn integrate_trace(&self, g: &mut Graph<T>, terms: &[(Var, T)]) -> Result<Var> {
        let hidden = g.shape(self.diag)[0];
        let squares: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        let last = g.shape(squares[0]).len() - 1;
        let stacked = g.concat(&squares, last)?;
        let diags = vec![self.diag; terms.len()];
        let diags = g.concat(&diags, 0)?;
        let weights: Vec<T> = terms.iter().flat_map(|&(_, c)| std::iter::repeat_n(c, hidden)).collect();
        let weights = g.constant(Tensor::new(&[terms.len() * hidden, 1], weights)?);
        let weighted = g.mul(diags, weights)?;
        let curvature = g.matmul(stacked, weighted)?;
        let total_weight = terms.iter().fold(T::zero(), |acc, &(_, c)| acc + c);
        let trace_sum = g.sum(self.diag);
        let linear = g.scale(trace_sum, total_weight);
        Ok(g.sub(linear, curvature)?)
    }
}

/// Integrates `dz/dt = Ω(z, t)` from `t0` to `t1` with `steps` RK4 steps.
/// Returns the end state and `−∫ tr(∂Ω/∂z) dt` summed over all rows of
/// each batch element (`[B]`).
pub fn ccnf_transform<T: Real, D: Dynamics<T>>(
    g: &mut Graph<T>,
    z: Var,
    dynamics: &D,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<(Var, Var)> {
    if steps == 0 {
        return Err(CoreError::Config("flow needs at least one integration step".into()));
    }
    let b = g.shape(z)[0];
    let dt = (t1 - t0) / steps as f64;
    let one = T::one();
    let (sixth, third, half) = (T::lit(dt / 6.0), T::lit(dt / 3.0), T::lit(dt / 2.0));
    let mut state = z;
    let mut terms = Vec::with_capacity(4 * steps);
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        let (k1, r1) = dynamics.eval(g, state, t)?;
        let z2 = g.lincomb(&[(state, one), (k1, half)])?;
        let (k2, r2) = dynamics.eval(g, z2, t + dt / 2.0)?;
        let z3 = g.lincomb(&[(state, one), (k2, half)])?;
        let (k3, r3) = dynamics.eval(g, z3, t + dt / 2.0)?;
        let z4 = g.lincomb(&[(state, one), (k3, T::lit(dt))])?;
        let (k4, r4) = dynamics.eval(g, z4, t + dt)?;
        state = g.lincomb(&[(state, one), (k1, sixth), (k2, third), (k3, third), (k4, sixth)])?;
        terms.extend([(r1, sixth), (r2, third), (r3, third), (r4, sixth)]);
        if !g.value(state).is_finite() {
            return Err(CoreError::Numerics(tcvae_numerics::NumericsError::NonFinite {
                op: "flow integration",
                node: state.index(),
            }));
        }
    }
    let trace = dynamics.integrate_trace(g, &terms)?;
    let per_element: usize = g.shape(trace)[1..].iter().product();
    let flat = g.reshape(trace, &[b, per_element])?;
    let total = g.sum_axis(flat, 1)?;
    let total = g.reshape(total, &[b])?;
    let delta = g.neg(total);
    Ok((state, delta))
}

/// Diagonal-Gaussian log-density of `x`, summed over every axis but the
/// first (`[B]`).
pub fn gaussian_log_density<T: Real>(g: &mut Graph<T>, x: Var, p: &GaussianParams) -> Result<Var> {
    let d = g.sub(x, p.mean)?;
    let sq = g.square(d);
    let nl = g.neg(p.logvar);
    let prec = g.exp(nl);
    let maha = g.mul(sq, prec)?;
    let terms = g.add(maha, p.logvar)?;
    let terms = g.add_scalar(terms, T::lit((2.0 * std::f64::consts::PI).ln()));
    let terms = g.scale(terms, T::lit(-0.5));
    let shape = g.shape(terms).to_vec();
    let flat = g.reshape(terms, &[shape[0], shape[1..].iter().product()])?;
    let s = g.sum_axis(flat, 1)?;
    Ok(g.reshape(s, &[shape[0]])?)
}

/// Single-draw estimate of `KL(q ‖ p)` averaged over the batch, with both
/// log-densities taken at the posterior's base draw. Flow corrections are
/// not part of the estimate: each path's correction lives on its own
/// trajectory, and their difference is unbounded below.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, posterior: &LatentSample, prior: &GaussianParams) -> Result<Var> {
    let log_q = gaussian_log_density(g, posterior.base, &posterior.params)?;
    let log_p = gaussian_log_density(g, posterior.base, prior)?;
    let diff = g.sub(log_q, log_p)?;
    Ok(g.mean(diff))
}

/// Closed-form `KL(N(μq, σq²) ‖ N(μp, σp²))` summed over entries.
pub fn gaussian_kl(mu_q: &[f64], logvar_q: &[f64], mu_p: &[f64], logvar_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|i| {
            let dm = mu_q[i] - mu_p[i];
            0.5 * (logvar_p[i] - logvar_q[i] + (logvar_q[i].exp() + dm * dm) / logvar_p[i].exp() - 1.0)
        })
        .sum()
}

/// How the base point is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Draw {
    /// `μ + σ ⊙ η` with seeded `η`.
    Sample(u64),
    /// The mean itself.
    Mean,
}

/// Draws a base point from `params` and maps it through `generator` (the
/// identity when `None`). The flow fields of the result are the unflowed
/// latent and a zero correction.
pub fn sample_latent<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: GaussianParams,
    generator: Option<&TanhMlp>,
    draw: Draw,
) -> Result<LatentSample> {
    let base = match draw {
        Draw::Sample(seed) => {
            let half = g.scale(params.logvar, T::lit(0.5));
            let sigma = g.exp(half);
            seeded_gaussian(g, params.mean, sigma, seed)?
        }
        Draw::Mean => params.mean,
    };
    let latent = match generator {
        Some(net) => net.forward(g, store, base)?,
        None => base,
    };
    let b = g.shape(base)[0];
    let delta = g.constant(Tensor::zeros(&[b]));
    Ok(LatentSample {
        params,
        base,
        latent,
        transformed: latent,
        delta,
    })
}

/// Applies the flow to a sample's latent, filling its flow fields.
pub fn apply_flow<T: Real, D: Dynamics<T>>(g: &mut Graph<T>, sample: LatentSample, dynamics: &D, steps: usize) -> Result<LatentSample> {
    let (transformed, delta) = ccnf_transform(g, sample.latent, dynamics, 0.0, 1.0, steps)?;
    Ok(LatentSample {
        transformed,
        delta,
        ..sample
    })
}

/// Splits `[…, 2k]` head output into mean and log-variance.
fn split_head<T: Real>(g: &mut Graph<T>, out: Var, k: usize) -> Result<GaussianParams> {
    let last = g.shape(out).len() - 1;
    let mean = g.narrow(out, last, 0, k)?;
    let logvar = g.narrow(out, last, k, k)?;
    if !g.value(out).is_finite() {
        return Err(CoreError::Numerics(tcvae_numerics::NumericsError::NonFinite {
            op: "distribution head",
            node: out.index(),
        }));
    }
    Ok(GaussianParams { mean, logvar })
}

/// Networks of the latent block.
#[derive(Clone, Debug)]
pub struct LatentNetworks {
    /// Flattened factors `[9·d]` to `[d]`.
    pub factor_align: Linear,
    pub prior_net: TanhMlp,
    pub prior_head: Linear,
    pub posterior_net: TanhMlp,
    pub posterior_head: Linear,
    pub prior_generator: Option<TanhMlp>,
    pub posterior_generator: Option<TanhMlp>,
    pub flow: FlowField,
    pub d: usize,
    pub k: usize,
    pub w: usize,
}

/// Everything the decoder and the loss need from the latent block.
#[derive(Clone, Copy, Debug)]
pub struct LatentOutputs {
    pub posterior: LatentSample,
    pub prior: Option<LatentSample>,
}

impl LatentNetworks {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, d: usize, k: usize, w: usize, generators: bool) -> Result<Self> {
        let gen = |bld: &mut Builder<'_, T>, name: &str| -> Result<Option<TanhMlp>> {
            Ok(if generators { Some(TanhMlp::new(bld, name, k, k, k)?) } else { None })
        };
        Ok(Self {
            factor_align: Linear::new(bld, "latent.factor_align", NUM_FACTORS * d, d, true)?,
            prior_net: TanhMlp::new(bld, "latent.prior_net", d, k, k)?,
            prior_head: Linear::new(bld, "latent.prior_head", k, 2 * k, true)?,
            posterior_net: TanhMlp::new(bld, "latent.posterior_net", 2 * d, k, k)?,
            posterior_head: Linear::new(bld, "latent.posterior_head", k, 2 * k, true)?,
            prior_generator: gen(bld, "latent.prior_generator")?,
            posterior_generator: gen(bld, "latent.posterior_generator")?,
            flow: FlowField::new(bld, "latent.flow", k, k, k)?,
            d,
            k,
            w,
        })
    }

    /// Column-space projection of the factors, `[B, 1, d]`.
    pub fn factor_features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, factors: Var) -> Result<Var> {
        let b = g.shape(factors)[0];
        let flat = g.reshape(factors, &[b, 1, NUM_FACTORS * self.d])?;
        self.factor_align.forward(g, store, flat)
    }

    /// Prior distribution from the factors; also returns the network output
    /// used as the flow condition.
    pub fn prior_params<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<(GaussianParams, Var)> {
        let pe = g.constant(position_table(self.w, self.w, self.d)?);
        let x = g.add(features, pe)?;
        let hidden = self.prior_net.forward(g, store, x)?;
        let out = self.prior_head.forward(g, store, hidden)?;
        Ok((split_head(g, out, self.k)?, hidden))
    }

    /// Posterior distribution from the encoder states `memory` (`[B, w, d]`)
    /// and factor features broadcast over time.
    pub fn posterior_params<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: Var,
        features: Var,
    ) -> Result<(GaussianParams, Var)> {
        let shape = g.shape(memory).to_vec();
        let feats = g.expand(features, &shape)?;
        let x = g.concat(&[memory, feats], 2)?;
        let hidden = self.posterior_net.forward(g, store, x)?;
        let out = self.posterior_head.forward(g, store, hidden)?;
        Ok((split_head(g, out, self.k)?, hidden))
    }
}

//! Multi-head attention whose heads are scaled by vector gates voted on by
//! the heads themselves and by the temporal factors.

use tcvae_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Builder, Linear};
use crate::temporal_factors::NUM_FACTORS;

const MASKED: f64 = -1e9;

/// `softmax(Q Kᵀ / √d_head) V` over `[B, L, d_head]` operands, with an
/// optional additive mask broadcast against the `[B, L, S]` logits.
pub fn scaled_dot_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dh = *g.shape(q).last().expect("rank ≥ 1");
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, T::lit(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax(logits)?;
    Ok(g.matmul(weights, v)?)
}

/// `[L, L]` additive mask hiding future positions.
pub fn causal_mask<T: Real>(l: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); l * l];
    for i in 0..l {
        for j in i + 1..l {
            data[i * l + j] = T::lit(MASKED);
        }
    }
    Tensor::new(&[l, l], data).expect("square mask")
}

/// Normalised votes and resulting gates of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct GateVote {
    /// `[B, n, n + 1]`: row `i` holds head `i`'s weights over the `n` head
    /// votes followed by the factor vote.
    pub beta: Var,
    /// `[B, n, d_head]`, entries in `(0, 1)`.
    pub gates: Var,
}

/// Gates from per-head summaries `h̄` (`[B, n, d_head]`) and the factor
/// summary `c̄` (`[B, 1, d_head]`). Votes are `v = x W + b` with `W`, `b`
/// shared across all `n + 1` candidates; head `i` scores candidate `j` by
/// `h̄_i · v_j`.
pub fn gate_votes<T: Real>(g: &mut Graph<T>, hbar: Var, cbar: Var, w: Var, b: Var) -> Result<GateVote> {
    let cand = g.concat(&[hbar, cbar], 1)?;
    let votes = g.linear(cand, w, Some(b))?;
    let vt = g.transpose(votes)?;
    let scores = g.matmul(hbar, vt)?;
    let beta = g.softmax(scores)?;
    let mix = g.matmul(beta, cand)?;
    let gates = g.sigmoid(mix);
    Ok(GateVote { beta, gates })
}

/// How head outputs are scaled before the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    Learned,
    /// Every gate forced to one.
    Off,
}

#[derive(Clone, Copy, Debug)]
pub struct GatedOutput {
    /// `[B, L, d]`.
    pub out: Var,
    pub vote: Option<GateVote>,
}

#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Shared vote map `[d_head, d_head]` and bias.
    pub vote_w: ParamId,
    pub vote_b: ParamId,
    /// Flattened factors `[9·d]` to `[d_head]`.
    pub factor_proj: Linear,
    pub heads: usize,
    pub d: usize,
}

impl GatedAttention {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!("{heads} heads do not divide d = {d}")));
        }
        let dh = d / heads;
        Ok(Self {
            q: Linear::new(bld, &format!("{name}.q"), d, d, true)?,
            k: Linear::new(bld, &format!("{name}.k"), d, d, true)?,
            v: Linear::new(bld, &format!("{name}.v"), d, d, true)?,
            o: Linear::new(bld, &format!("{name}.o"), d, d, true)?,
            vote_w: bld.xavier(&format!("{name}.vote.w"), &[dh, dh], dh, dh)?,
            vote_b: bld.full(&format!("{name}.vote.b"), &[dh], 0.0)?,
            factor_proj: Linear::new(bld, &format!("{name}.factor"), NUM_FACTORS * d, dh, true)?,
            heads,
            d,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Per-head outputs `H_i`, each `[B, L, d_head]`.
    pub fn heads<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, memory: Var, causal: bool) -> Result<Vec<Var>> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let mask = if causal {
            let (l, s) = (g.shape(x)[1], g.shape(memory)[1]);
            if l != s {
                return Err(CoreError::Config("causal mask needs self-attention".into()));
            }
            Some(g.constant(causal_mask(l)))
        } else {
            None
        };
        let dh = self.head_dim();
        let mut out = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = g.narrow(q, 2, i * dh, dh)?;
            let ki = g.narrow(k, 2, i * dh, dh)?;
            let vi = g.narrow(v, 2, i * dh, dh)?;
            out.push(scaled_dot_attention(g, qi, ki, vi, mask)?);
        }
        Ok(out)
    }

    /// Gated multi-head attention of `x` over `memory` conditioned on the
    /// factor matrix `factors` (`[B, 9, d]`).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        factors: Var,
        causal: bool,
        gating: Gating,
    ) -> Result<GatedOutput> {
        let heads = self.heads(g, store, x, memory, causal)?;
        let b = g.shape(x)[0];
        let dh = self.head_dim();
        let (scaled, vote) = match gating {
            Gating::Learned => {
                let mut summaries = Vec::with_capacity(self.heads);
                for &h in &heads {
                    summaries.push(g.mean_axis(h, 1)?);
                }
                let hbar = g.concat(&summaries, 1)?;
                let flat = g.reshape(factors, &[b, 1, NUM_FACTORS * self.d])?;
                let cbar = self.factor_proj.forward(g, store, flat)?;
                let w = g.param(store, self.vote_w);
                let bias = g.param(store, self.vote_b);
                let vote = gate_votes(g, hbar, cbar, w, bias)?;
                let mut scaled = Vec::with_capacity(self.heads);
                for (i, &h) in heads.iter().enumerate() {
                    let gi = g.narrow(vote.gates, 1, i, 1)?;
                    scaled.push(g.mul(h, gi)?);
                }
                (scaled, Some(vote))
            }
            Gating::Off => {
                let ones = g.constant(Tensor::ones(&[b, 1, dh]));
                let mut scaled = Vec::with_capacity(self.heads);
                for &h in &heads {
                    scaled.push(g.mul(h, ones)?);
                }
                (scaled, None)
            }
        };
        let cat = g.concat(&scaled, 2)?;
        let out = self.o.forward(g, store, cat)?;
        Ok(GatedOutput { out, vote })
    }

    /// Plain multi-head attention with the same projections and no gates.
    pub fn forward_ungated<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let heads = self.heads(g, store, x, memory, causal)?;
        let cat = g.concat(&heads, 2)?;
        self.o.forward(g, store, cat)
    }
}

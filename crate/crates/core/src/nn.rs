//! Parameter registration and small dense building blocks.

use tcvae_numerics::{init, Graph, ParamId, ParamStore, Real, SeededRng, Tensor, Var};

use crate::error::Result;

/// Registers named, freshly initialised parameters in a store.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: SeededRng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: tcvae_numerics::sampling::rng(seed),
        }
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let v = init::xavier_uniform(&mut self.rng, shape, fan_in, fan_out);
        Ok(self.store.add(name, v)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let v = init::normal(&mut self.rng, shape, std);
        Ok(self.store.add(name, v)?)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape, T::lit(value)))?)
    }
}

/// `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = bld.xavier(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out)?;
        let b = if bias {
            Some(bld.full(&format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

/// Two dense layers with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct TanhMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl TanhMlp {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(bld, &format!("{name}.0"), fan_in, hidden, true)?,
            out: Linear::new(bld, &format!("{name}.1"), hidden, fan_out, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.tanh(h);
        self.out.forward(g, store, h)
    }
}

/// Position-wise GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(bld, &format!("{name}.up"), d, d_ff, true)?,
            down: Linear::new(bld, &format!("{name}.down"), d_ff, d, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: bld.full(&format!("{name}.gain"), &[d], 1.0)?,
            bias: bld.full(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, T::lit(Self::EPS))?)
    }
}

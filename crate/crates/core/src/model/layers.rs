use tcvae_numerics::{Graph, ParamStore, Real, Var};

use crate::attention::{GatedAttention, Gating};
use crate::error::Result;
use crate::nn::{Builder, FeedForward, LayerNorm};

/// Gated self-attention and a feed-forward block, each followed by a
/// residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: GatedAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            attn: GatedAttention::new(bld, &format!("{name}.attn"), d, heads)?,
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), d)?,
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), d, d_ff)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, factors: Var, gating: Gating) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x, factors, false, gating)?;
        let x = g.add(x, a.out)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// Masked gated self-attention, gated cross-attention over the memory, then
/// a feed-forward block; post-norm residuals throughout.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: GatedAttention,
    pub norm1: LayerNorm,
    pub cross_attn: GatedAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            self_attn: GatedAttention::new(bld, &format!("{name}.self_attn"), d, heads)?,
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), d)?,
            cross_attn: GatedAttention::new(bld, &format!("{name}.cross_attn"), d, heads)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), d)?,
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), d, d_ff)?,
            norm3: LayerNorm::new(bld, &format!("{name}.norm3"), d)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        factors: Var,
        gating: Gating,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, store, x, x, factors, true, gating)?;
        let x = g.add(x, a.out)?;
        let x = self.norm1.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, x, memory, factors, false, gating)?;
        let x = g.add(x, c.out)?;
        let x = self.norm2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, store, x)
    }
}

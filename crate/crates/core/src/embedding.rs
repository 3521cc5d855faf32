//! Input representation: circular-convolution token embedding, fixed
//! sinusoidal positions and learned calendar-stamp tables.

use tcvae_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::dataio::{Stamp, STAMP_CARDINALITIES, STAMP_TYPES};
use crate::error::{CoreError, Result};
use crate::nn::Builder;

/// Std of the initial stamp-table entries.
pub const STAMP_INIT_STD: f64 = 0.1;

/// `PE(pos, 2j) = sin(pos / (2w)^{2j/d})`, `PE(pos, 2j+1) = cos(…)`.
pub fn position_embed(pos: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(CoreError::Config(format!("embedding dim must be even, got {d}")));
    }
    let base = (2 * w.max(1)) as f64;
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let angle = pos as f64 / base.powf(2.0 * j as f64 / d as f64);
        out[2 * j] = angle.sin();
        out[2 * j + 1] = angle.cos();
    }
    Ok(out)
}

/// Positions `0..len` stacked as `[len, d]`.
pub fn position_table<T: Real>(len: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        data.extend(position_embed(pos, w, d)?.into_iter().map(T::lit));
    }
    Ok(Tensor::new(&[len, d], data)?)
}

/// Output of [`Embedding::forward`], both `[B, L, d]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedSequence {
    pub combined: Var,
    pub token_stream: Var,
}

/// Parameters of one embedding stack (encoder or decoder side).
#[derive(Clone, Debug)]
pub struct Embedding {
    /// `[3·d_x, d]`: taps for `x_{τ−1}`, `x_τ`, `x_{τ+1}`.
    pub conv: ParamId,
    /// Balance factor `[1]`.
    pub rho: ParamId,
    pub tables: [ParamId; STAMP_TYPES],
    pub d_x: usize,
    pub d: usize,
    /// Window length used as the positional base.
    pub w: usize,
}

impl Embedding {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, d_x: usize, d: usize, w: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(CoreError::Config(format!("embedding dim must be even, got {d}")));
        }
        let conv = bld.xavier(&format!("{name}.conv"), &[3 * d_x, d], 3 * d_x, d)?;
        let rho = bld.full(&format!("{name}.rho"), &[1], 1.0)?;
        const NAMES: [&str; STAMP_TYPES] = ["month", "day", "weekday", "hour", "minute", "ampm"];
        let mut tables = Vec::with_capacity(STAMP_TYPES);
        for (i, card) in STAMP_CARDINALITIES.iter().enumerate() {
            tables.push(bld.normal(&format!("{name}.stamp.{}", NAMES[i]), &[*card, d], STAMP_INIT_STD)?);
        }
        Ok(Self {
            conv,
            rho,
            tables: tables.try_into().expect("six tables"),
            d_x,
            d,
            w,
        })
    }

    /// Token stream `U` of `values` (`[B, L, d_x]`): width-3 convolution with
    /// circular padding along time, no bias.
    pub fn token_stream<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, values: Var) -> Result<Var> {
        let prev = g.roll(values, 1, 1)?;
        let next = g.roll(values, 1, -1)?;
        let taps = g.concat(&[prev, values, next], 2)?;
        let w = g.param(store, self.conv);
        Ok(g.matmul(taps, w)?)
    }

    /// `ρ·U + PE + SE` for a batch; `stamps` holds `B·L` entries.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        values: Var,
        stamps: &[Stamp],
    ) -> Result<EmbeddedSequence> {
        let shape = g.shape(values).to_vec();
        if shape.len() != 3 || shape[2] != self.d_x {
            return Err(CoreError::OutOfRange("embedding input", format!("{shape:?}, expected [B, L, {}]", self.d_x)));
        }
        let (b, l) = (shape[0], shape[1]);
        if stamps.len() != b * l {
            return Err(CoreError::OutOfRange("stamps", format!("{} for {b}×{l} steps", stamps.len())));
        }
        for s in stamps {
            crate::dataio::check_stamp(s)?;
        }
        let u = self.token_stream(g, store, values)?;
        let rho = g.param(store, self.rho);
        let scaled = g.mul(u, rho)?;
        let pe = g.constant(position_table(l, self.w, self.d)?);
        let mut acc = g.add(scaled, pe)?;
        let se = self.stamp_embedding(g, store, stamps)?;
        let se = g.reshape(se, &[b, l, self.d])?;
        acc = g.add(acc, se)?;
        Ok(EmbeddedSequence {
            combined: acc,
            token_stream: u,
        })
    }

    /// Sum over the stamp types of each type's table row, `[n, d]`.
    pub fn stamp_embedding<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stamps: &[Stamp]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &table) in self.tables.iter().enumerate() {
            let idx: Vec<usize> = stamps.iter().map(|s| s[i]).collect();
            let t = g.param(store, table);
            let rows = g.gather_rows(t, &idx)?;
            acc = Some(match acc {
                None => rows,
                Some(a) => g.add(a, rows)?,
            });
        }
        Ok(acc.expect("at least one stamp type"))
    }
}

/// Decoder-side values and stamps: the last `token_len` input rows, then
/// `h` zero rows stamped with the forecast instants.
pub fn build_decoder_input(
    inputs: &Tensor<f64>,
    input_stamps: &[Stamp],
    target_stamps: &[Stamp],
    token_len: usize,
    h: usize,
) -> Result<(Tensor<f64>, Vec<Stamp>)> {
    let shape = inputs.shape();
    let (b, w, d_x) = (shape[0], shape[1], shape[2]);
    if token_len == 0 || token_len > w {
        return Err(CoreError::OutOfRange("token length", format!("{token_len} not in 1..={w}")));
    }
    if input_stamps.len() != b * w || target_stamps.len() != b * h {
        return Err(CoreError::OutOfRange("stamps", "do not match the batch".into()));
    }
    let l = token_len + h;
    let mut data = Vec::with_capacity(b * l * d_x);
    let mut stamps = Vec::with_capacity(b * l);
    for i in 0..b {
        let win = inputs.row(i);
        data.extend_from_slice(&win[(w - token_len) * d_x..]);
        data.extend(std::iter::repeat_n(0.0, h * d_x));
        stamps.extend_from_slice(&input_stamps[i * w + w - token_len..(i + 1) * w]);
        stamps.extend_from_slice(&target_stamps[i * h..(i + 1) * h]);
    }
    Ok((Tensor::new(&[b, l, d_x], data)?, stamps))
}

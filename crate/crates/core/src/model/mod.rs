//! The assembled forecaster: encoder, latent block, decoder, heads and loss.

mod config;
mod layers;

use tcvae_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::attention::Gating;
use crate::dataio::{Scaler, Stamp, WindowBatch};
use crate::embedding::{build_decoder_input, Embedding};
use crate::error::{CoreError, Result};
use crate::latent::{apply_flow, kl_divergence, sample_latent, Draw, GaussianParams, LatentNetworks, LatentSample};
use crate::nn::{Builder, Linear};
use crate::temporal_factors::{FactorTrace, HawkesParams};

pub use config::{ModelConfig, Switches};
pub use layers::{DecoderLayer, EncoderLayer};

/// Model inputs for one batch, in the model's precision.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, w, d_x]`.
    pub inputs: Tensor<T>,
    pub input_stamps: Vec<Stamp>,
    /// `[B, token_len + h, d_x]`.
    pub decoder_inputs: Tensor<T>,
    pub decoder_stamps: Vec<Stamp>,
    /// `[B, h, d_y]`.
    pub targets: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_windows(windows: &WindowBatch, token_len: usize) -> Result<Self> {
        let (dec, dec_stamps) = build_decoder_input(
            &windows.inputs,
            &windows.input_stamps,
            &windows.target_stamps,
            token_len,
            windows.horizon(),
        )?;
        Ok(Self {
            inputs: windows.inputs.cast(),
            input_stamps: windows.input_stamps.clone(),
            decoder_inputs: dec.cast(),
            decoder_stamps: dec_stamps,
            targets: windows.targets.cast(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which latent path feeds the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LatentPath {
    #[default]
    Posterior,
    Prior,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub draw: Draw,
    pub path: LatentPath,
    /// Build the loss terms (needs targets).
    pub with_loss: bool,
}

impl ForwardOptions {
    pub fn train(seed: u64) -> Self {
        Self {
            draw: Draw::Sample(seed),
            path: LatentPath::Posterior,
            with_loss: true,
        }
    }

    pub fn predict(draw: Draw) -> Self {
        Self {
            draw,
            path: LatentPath::Posterior,
            with_loss: false,
        }
    }
}

/// Encoder-side results.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, w, d]`.
    pub memory: Var,
    pub factors: FactorTrace,
    /// Factor features `[B, 1, d]` conditioning both distributions.
    pub features: Var,
    pub posterior: GaussianParams,
    pub posterior_condition: Var,
    pub prior: Option<(GaussianParams, Option<Var>)>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Option<Var>,
    pub forecasting: Var,
    pub kl: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub encoded: Encoded,
    pub posterior: LatentSample,
    /// Built only when decoding from the prior.
    pub prior: Option<LatentSample>,
    /// Decoder-side factors.
    pub decoder_factors: FactorTrace,
    /// `[B, w, d_x]`, absent without the backcast switch.
    pub backcast: Option<Var>,
    /// `[B, h, d_y]`.
    pub forecast: Var,
    pub loss: Option<LossTerms>,
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TcvaeNet {
    pub config: ModelConfig,
    pub encoder_embedding: Embedding,
    pub decoder_embedding: Embedding,
    pub hawkes: HawkesParams,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub latent: LatentNetworks,
    pub latent_proj: Linear,
    /// `[token_len + h, w]` temporal map of the backcast head.
    pub backcast_time: ParamId,
    pub backcast_head: Linear,
    pub forecast_head: Linear,
}

impl TcvaeNet {
    /// Registers freshly initialised parameters in `store`.
    pub fn build<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, k) = (c.d_model, c.latent_dim);
        let mut bld = Builder::new(store, c.init_seed);
        let encoder_embedding = Embedding::new(&mut bld, "encoder.embed", c.input_dim, d, c.window)?;
        let decoder_embedding = Embedding::new(&mut bld, "decoder.embed", c.input_dim, d, c.window)?;
        let hawkes = HawkesParams::new(&mut bld, "hawkes", d)?;
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(&mut bld, &format!("encoder.{i}"), d, c.heads, c.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer::new(&mut bld, &format!("decoder.{i}"), d, c.heads, c.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        let latent = LatentNetworks::new(&mut bld, d, k, c.window, c.generators)?;
        let latent_proj = Linear::new(&mut bld, "latent.proj", k, d, true)?;
        let l_dec = c.decoder_len();
        let backcast_time = bld.xavier("backcast.time", &[l_dec, c.window], l_dec, c.window)?;
        let backcast_head = Linear::new(&mut bld, "backcast.head", d, c.input_dim, true)?;
        let forecast_head = Linear::new(&mut bld, "forecast.head", d, c.output_dim(), true)?;
        Ok(Self {
            config,
            encoder_embedding,
            decoder_embedding,
            hawkes,
            encoder,
            decoder,
            latent,
            latent_proj,
            backcast_time,
            backcast_head,
            forecast_head,
        })
    }

    fn gating(&self) -> Gating {
        if self.config.switches.gam {
            Gating::Learned
        } else {
            Gating::Off
        }
    }

    fn check_batch<T: Real>(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        let b = batch.len();
        let want_in = [b, c.window, c.input_dim];
        let want_dec = [b, c.decoder_len(), c.input_dim];
        if batch.inputs.shape() != want_in || batch.decoder_inputs.shape() != want_dec {
            return Err(CoreError::OutOfRange(
                "batch",
                format!(
                    "inputs {:?} / decoder {:?}, expected {want_in:?} / {want_dec:?}",
                    batch.inputs.shape(),
                    batch.decoder_inputs.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Embedding, factor extraction, encoder stack and distribution heads.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch<T>, need_prior: bool) -> Result<Encoded> {
        self.check_batch(batch)?;
        let sw = self.config.switches;
        let x = g.constant(batch.inputs.clone());
        let emb = self.encoder_embedding.forward(g, store, x, &batch.input_stamps)?;
        let factors = self.hawkes.forward(g, store, emb.token_stream, sw.tha)?;
        let mut h = emb.combined;
        for layer in &self.encoder {
            h = layer.forward(g, store, h, factors.factors, self.gating())?;
        }
        let memory = h;
        let b = batch.len();
        let features = if sw.fda {
            self.latent.factor_features(g, store, factors.factors)?
        } else {
            g.constant(Tensor::zeros(&[b, 1, self.config.d_model]))
        };
        let (posterior, posterior_condition) = self.latent.posterior_params(g, store, memory, features)?;
        let prior = if !need_prior {
            None
        } else if sw.fda {
            let (p, cond) = self.latent.prior_params(g, store, features)?;
            Some((p, Some(cond)))
        } else {
            let z = g.constant(Tensor::zeros(&[b, self.config.window, self.config.latent_dim]));
            Some((GaussianParams { mean: z, logvar: z }, None))
        };
        Ok(Encoded {
            memory,
            factors,
            features,
            posterior,
            posterior_condition,
            prior,
        })
    }

    fn latent_path<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        params: GaussianParams,
        condition: Option<Var>,
        generator: Option<&crate::nn::TanhMlp>,
        draw: Draw,
    ) -> Result<LatentSample> {
        let sw = self.config.switches;
        let gen = if sw.fda { generator } else { None };
        let sample = sample_latent(g, store, params, gen, draw)?;
        match condition {
            Some(cond) if sw.fda && sw.ccnf => {
                let flow = self.latent.flow.bind(g, store, cond)?;
                apply_flow(g, sample, &flow, self.config.flow_steps)
            }
            _ => Ok(sample),
        }
    }

    /// Decoder stack over the decoder input, conditioned on `latent`
    /// (`[B, w, k]`); returns decoder factors, backcast and forecast.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch<T>,
        memory: Var,
        latent: Var,
    ) -> Result<(FactorTrace, Option<Var>, Var)> {
        let c = &self.config;
        let xd = g.constant(batch.decoder_inputs.clone());
        let emb = self.decoder_embedding.forward(g, store, xd, &batch.decoder_stamps)?;
        let factors = self.hawkes.forward(g, store, emb.token_stream, c.switches.tha)?;
        let zp = self.latent_proj.forward(g, store, latent)?;
        let memory = g.add(memory, zp)?;
        let mut h = emb.combined;
        for layer in &self.decoder {
            h = layer.forward(g, store, h, memory, factors.factors, self.gating())?;
        }
        let future = g.narrow(h, 1, c.token_len, c.horizon)?;
        let mut forecast = self.forecast_head.forward(g, store, future)?;
        if c.anchored_forecast {
            let x = g.constant(batch.inputs.clone());
            let last = g.narrow(x, 1, c.window - 1, 1)?;
            let sel = g.constant(target_selector(c));
            let anchor = g.matmul(last, sel)?;
            forecast = g.add(forecast, anchor)?;
        }
        let backcast = if c.switches.backcast {
            let ht = g.transpose(h)?;
            let a = g.param(store, self.backcast_time);
            let mixed = g.matmul(ht, a)?;
            let mixed = g.transpose(mixed)?;
            Some(self.backcast_head.forward(g, store, mixed)?)
        } else {
            None
        };
        Ok((factors, backcast, forecast))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch<T>, opts: ForwardOptions) -> Result<ForwardOutput> {
        let sw = self.config.switches;
        let need_prior = (opts.with_loss && sw.kl) || opts.path == LatentPath::Prior;
        let encoded = self.encode(g, store, batch, need_prior)?;
        let posterior = self.latent_path(
            g,
            store,
            encoded.posterior,
            Some(encoded.posterior_condition),
            self.latent.posterior_generator.as_ref(),
            opts.draw,
        )?;
        let prior = match encoded.prior {
            Some((params, cond)) if opts.path == LatentPath::Prior => {
                Some(self.latent_path(g, store, params, cond, self.latent.prior_generator.as_ref(), opts.draw)?)
            }
            _ => None,
        };
        let z = match (opts.path, prior) {
            (LatentPath::Prior, Some(p)) => p.transformed,
            _ => posterior.transformed,
        };
        let (decoder_factors, backcast, forecast) = self.decode(g, store, batch, encoded.memory, z)?;
        let loss = if opts.with_loss {
            let x = g.constant(batch.inputs.clone());
            let y = g.constant(batch.targets.clone());
            let kl = match (sw.kl, encoded.prior) {
                (true, Some((p, _))) => Some(kl_divergence(g, &posterior, &p)?),
                _ => None,
            };
            Some(loss_terms(g, backcast, forecast, x, y, kl, self.config.lambda)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            encoded,
            posterior,
            prior,
            decoder_factors,
            backcast,
            forecast,
            loss,
        })
    }
}

/// `MSE(X̂, X) + MSE(Ŷ, Y) + λ·KL`, with absent terms contributing zero.
pub fn loss_terms<T: Real>(
    g: &mut Graph<T>,
    backcast: Option<Var>,
    forecast: Var,
    inputs: Var,
    targets: Var,
    kl: Option<Var>,
    lambda: f64,
) -> Result<LossTerms> {
    let forecasting = g.mse(forecast, targets)?;
    let reconstruction = match backcast {
        Some(b) => Some(g.mse(b, inputs)?),
        None => None,
    };
    let mut total = forecasting;
    if let Some(r) = reconstruction {
        total = g.add(r, total)?;
    }
    if let Some(k) = kl {
        let weighted = g.scale(k, T::lit(lambda));
        total = g.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        reconstruction,
        forecasting,
        kl,
    })
}

/// A network with its parameter values and the scaler of its training data.
#[derive(Clone, Debug)]
pub struct Tcvae<T: Real> {
    pub net: TcvaeNet,
    pub params: ParamStore<T>,
    pub scaler: Option<Scaler>,
}

/// Windows per forward pass during batched prediction.
const PREDICT_CHUNK: usize = 256;

impl<T: Real> Tcvae<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = TcvaeNet::build(config, &mut params)?;
        Ok(Self { net, params, scaler: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>, opts: ForwardOptions) -> Result<ForwardOutput> {
        self.net.forward(g, &self.params, batch, opts)
    }

    /// Normalised forecasts `[N, h, d_y]` for normalised windows. Windows are
    /// run in chunks of 256; each chunk draws its noise from a seed derived
    /// from the given seed and the chunk index.
    pub fn predict(&self, windows: &WindowBatch, draw: Draw) -> Result<Tensor<f64>> {
        let c = self.config();
        if windows.window() != c.window || windows.horizon() != c.horizon {
            return Err(CoreError::OutOfRange(
                "window",
                format!(
                    "w = {}, h = {}; model expects w = {}, h = {}",
                    windows.window(),
                    windows.horizon(),
                    c.window,
                    c.horizon
                ),
            ));
        }
        let n = windows.len();
        let mut out = Vec::with_capacity(n * c.horizon * c.output_dim());
        for (chunk_idx, start) in (0..n).step_by(PREDICT_CHUNK).enumerate() {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
            let sub = windows.select(&idx);
            let batch = Batch::<T>::from_windows(&sub, c.token_len)?;
            let draw = match draw {
                Draw::Sample(s) => Draw::Sample(tcvae_numerics::mix_seed(s, chunk_idx as u64)),
                Draw::Mean => Draw::Mean,
            };
            let mut g = Graph::new();
            let o = self.forward(&mut g, &batch, ForwardOptions::predict(draw))?;
            g.check_finite()?;
            out.extend(g.value(o.forecast).to_f64_vec());
        }
        Ok(Tensor::new(&[n, c.horizon, c.output_dim()], out)?)
    }

    /// Forecast in raw units for one raw window (`[w, d_x]`) with its input
    /// and horizon stamps.
    pub fn forecast(&self, window: &Tensor<f64>, input_stamps: &[Stamp], target_stamps: &[Stamp], draw: Draw) -> Result<Tensor<f64>> {
        let c = self.config();
        if window.shape() != [c.window, c.input_dim] {
            return Err(CoreError::OutOfRange(
                "window",
                format!("shape {:?}, model expects [{}, {}]", window.shape(), c.window, c.input_dim),
            ));
        }
        let scaler = self.scaler.as_ref().ok_or_else(|| CoreError::Config("model has no fitted scaler".into()))?;
        let normed = scaler.normalize(window).reshape(&[1, c.window, c.input_dim])?;
        let batch = WindowBatch {
            inputs: normed,
            targets: Tensor::zeros(&[1, c.horizon, c.output_dim()]),
            input_stamps: input_stamps.to_vec(),
            target_stamps: target_stamps.to_vec(),
            target_columns: c.target_columns.clone(),
            starts: vec![0],
        };
        let pred = self.predict(&batch, draw)?.reshape(&[c.horizon, c.output_dim()])?;
        Ok(scaler.inverse_columns(&pred, &c.target_columns))
    }
}

/// `[d_x, d_y]` 0/1 matrix picking the target columns.
fn target_selector<T: Real>(c: &ModelConfig) -> Tensor<T> {
    let d_y = c.output_dim();
    let mut sel = Tensor::zeros(&[c.input_dim, d_y]);
    for (k, &j) in c.target_columns.iter().enumerate() {
        sel.data_mut()[j * d_y + k] = T::one();
    }
    sel
}

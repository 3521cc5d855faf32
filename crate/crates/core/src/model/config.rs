use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::latent::DEFAULT_FLOW_STEPS;

/// Ablation switches; all on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Hawkes excitation on the attended token stream.
    pub tha: bool,
    /// Learned head gates.
    pub gam: bool,
    /// Temporal-conditional latent distribution (prior, conditioned
    /// posterior, generators and flow).
    pub fda: bool,
    /// Continuous flow on the latent.
    pub ccnf: bool,
    /// KL term in the loss.
    pub kl: bool,
    /// Backcast head and reconstruction term.
    pub backcast: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::all()
    }
}

impl Switches {
    pub const NAMES: [&'static str; 6] = ["tha", "gam", "fda", "ccnf", "kl", "backcast"];

    pub fn all() -> Self {
        Self {
            tha: true,
            gam: true,
            fda: true,
            ccnf: true,
            kl: true,
            backcast: true,
        }
    }

    fn slot(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "tha" => &mut self.tha,
            "gam" => &mut self.gam,
            "fda" => &mut self.fda,
            "ccnf" => &mut self.ccnf,
            "kl" => &mut self.kl,
            "backcast" => &mut self.backcast,
            other => return Err(CoreError::Config(format!("unknown switch `{other}`"))),
        })
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        *self.slot(name)? = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<bool> {
        let mut copy = *self;
        Ok(*copy.slot(name)?)
    }

    /// Copy with one switch turned off.
    pub fn without(&self, name: &str) -> Result<Self> {
        let mut s = *self;
        s.set(name, false)?;
        Ok(s)
    }
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub window: usize,
    pub horizon: usize,
    pub token_len: usize,
    pub input_dim: usize,
    /// Input columns forecast by the model (`d_y` of them).
    pub target_columns: Vec<usize>,
    pub d_model: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub flow_steps: usize,
    pub lambda: f64,
    /// Use networks for the latent generators; identity when false.
    pub generators: bool,
    /// Forecast head predicts an offset from the last observed value of
    /// each target; a plain linear readout when false.
    #[serde(default = "default_true")]
    pub anchored_forecast: bool,
    pub switches: Switches,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for `d_x` variables, forecasting all of them.
    pub fn new(window: usize, horizon: usize, input_dim: usize) -> Self {
        let d = 64;
        Self {
            window,
            horizon,
            token_len: (window / 2).max(1),
            input_dim,
            target_columns: (0..input_dim).collect(),
            d_model: d,
            latent_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            ff_dim: 2 * d,
            flow_steps: DEFAULT_FLOW_STEPS,
            lambda: 0.01,
            generators: true,
            anchored_forecast: true,
            switches: Switches::all(),
            init_seed: 0,
        }
    }

    /// `w = 8, h = 4, d = 16, k = 8, n = 2`.
    pub fn tiny(input_dim: usize) -> Self {
        Self {
            d_model: 16,
            latent_dim: 8,
            heads: 2,
            ff_dim: 32,
            ..Self::new(8, 4, input_dim)
        }
    }

    pub fn output_dim(&self) -> usize {
        self.target_columns.len()
    }

    pub fn decoder_len(&self) -> usize {
        self.token_len + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.window == 0 || self.horizon == 0 {
            return bad("window and horizon must be positive".into());
        }
        if self.token_len == 0 || self.token_len > self.window {
            return bad(format!("token_len {} not in 1..={}", self.token_len, self.window));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.target_columns.is_empty() || self.target_columns.iter().any(|&c| c >= self.input_dim) {
            return bad(format!("target columns {:?} invalid for {} inputs", self.target_columns, self.input_dim));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model = {}", self.heads, self.d_model));
        }
        if self.latent_dim == 0 || self.ff_dim == 0 || self.flow_steps == 0 {
            return bad("latent_dim, ff_dim and flow_steps must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("at least one encoder and one decoder layer required".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::new(96, 24, 7).validate().unwrap();
        let t = ModelConfig::tiny(3);
        t.validate().unwrap();
        assert_eq!((t.window, t.horizon, t.d_model, t.latent_dim, t.heads, t.token_len), (8, 4, 16, 8, 2, 4));
    }

    #[test]
    fn invalid() {
        let mut c = ModelConfig::tiny(3);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.target_columns = vec![3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn switch_names() {
        let mut s = Switches::all();
        for n in Switches::NAMES {
            assert!(s.get(n).unwrap());
            s.set(n, false).unwrap();
        }
        assert_eq!(s, Switches { tha: false, gam: false, fda: false, ccnf: false, kl: false, backcast: false });
        assert!(s.set("foo", true).is_err());
    }
}

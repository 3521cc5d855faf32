//! Run configuration: a line-oriented `key = value` file whose keys double as
//! command-line flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tcvae_core::model::{ModelConfig, Switches};
use tcvae_core::train::TrainConfig;
use tcvae_numerics::Precision;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub split: [f64; 3],
    pub window: usize,
    pub horizon: usize,
    /// Defaults to half the window.
    pub token_len: Option<usize>,
    /// Target columns by name; all variables when empty.
    pub targets: Vec<String>,
    pub d_model: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Defaults to twice `d_model`.
    pub ff_dim: Option<usize>,
    pub flow_steps: usize,
    pub generators: bool,
    #[serde(default = "default_true")]
    pub anchored_forecast: bool,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub switches: Switches,
    pub precision: String,
    pub out: PathBuf,
}

fn default_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(24, 24, 1);
        let t = TrainConfig::default();
        Self {
            data: None,
            split: tcvae_core::dataio::DEFAULT_SPLIT,
            window: m.window,
            horizon: m.horizon,
            token_len: None,
            targets: Vec::new(),
            d_model: m.d_model,
            latent_dim: m.latent_dim,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            ff_dim: None,
            flow_steps: m.flow_steps,
            generators: m.generators,
            anchored_forecast: m.anchored_forecast,
            lambda: m.lambda,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            switches: Switches::all(),
            precision: Precision::F32.as_str().to_string(),
            out: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: [&str; 28] = [
    "data",
    "split",
    "window",
    "horizon",
    "token_len",
    "targets",
    "d_model",
    "latent_dim",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "ff_dim",
    "flow_steps",
    "generators",
    "anchored_forecast",
    "lambda",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "tha",
    "gam",
    "fda",
    "ccnf",
    "kl",
    "backcast",
    "precision",
    "out",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}`: expected on/off, got `{value}`"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| CliError::Config("`split` needs three ratios".into()))?;
            }
            "window" => self.window = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "token_len" => self.token_len = Some(parse(key, value)?),
            "targets" => {
                self.targets = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty() && s != "all")
                    .collect()
            }
            "d_model" => self.d_model = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "ff_dim" => self.ff_dim = Some(parse(key, value)?),
            "flow_steps" => self.flow_steps = parse(key, value)?,
            "generators" => self.generators = parse_bool(key, value)?,
            "anchored_forecast" => self.anchored_forecast = parse_bool(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tha" | "gam" | "fda" | "ccnf" | "kl" | "backcast" => {
                self.switches.set(key, parse_bool(key, value)?)?
            }
            "precision" => {
                value.parse::<Precision>()?;
                self.precision = value.to_string();
            }
            "out" => self.out = PathBuf::from(value),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision> {
        Ok(self.precision.parse()?)
    }

    /// Column indices of the targets among `names`.
    pub fn target_columns(&self, names: &[String]) -> Result<Vec<usize>> {
        if self.targets.is_empty() {
            return Ok((0..names.len()).collect());
        }
        self.targets
            .iter()
            .map(|t| {
                names
                    .iter()
                    .position(|n| n == t)
                    .ok_or_else(|| CliError::Config(format!("target `{t}` is not a column of the data")))
            })
            .collect()
    }

    /// Model hyperparameters for data with the given variable names.
    pub fn model_config(&self, names: &[String]) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.window, self.horizon, names.len());
        if let Some(t) = self.token_len {
            m.token_len = t;
        }
        m.target_columns = self.target_columns(names)?;
        m.d_model = self.d_model;
        m.latent_dim = self.latent_dim;
        m.heads = self.heads;
        m.encoder_layers = self.encoder_layers;
        m.decoder_layers = self.decoder_layers;
        m.ff_dim = self.ff_dim.unwrap_or(2 * self.d_model);
        m.flow_steps = self.flow_steps;
        m.generators = self.generators;
        m.anchored_forecast = self.anchored_forecast;
        m.lambda = self.lambda;
        m.switches = self.switches;
        m.init_seed = self.seed;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        };
        t.validate()?;
        Ok(t)
    }

    /// `key = value` text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut lines = Vec::new();
        if let Some(d) = &self.data {
            lines.push(format!("data = {}", d.display()));
        }
        lines.push(format!("split = {},{},{}", self.split[0], self.split[1], self.split[2]));
        lines.push(format!("window = {}", self.window));
        lines.push(format!("horizon = {}", self.horizon));
        if let Some(t) = self.token_len {
            lines.push(format!("token_len = {t}"));
        }
        if !self.targets.is_empty() {
            lines.push(format!("targets = {}", self.targets.join(",")));
        }
        lines.push(format!("d_model = {}", self.d_model));
        lines.push(format!("latent_dim = {}", self.latent_dim));
        lines.push(format!("heads = {}", self.heads));
        lines.push(format!("encoder_layers = {}", self.encoder_layers));
        lines.push(format!("decoder_layers = {}", self.decoder_layers));
        if let Some(f) = self.ff_dim {
            lines.push(format!("ff_dim = {f}"));
        }
        lines.push(format!("flow_steps = {}", self.flow_steps));
        lines.push(format!("generators = {}", on(self.generators)));
        lines.push(format!("anchored_forecast = {}", on(self.anchored_forecast)));
        lines.push(format!("lambda = {}", self.lambda));
        lines.push(format!("lr = {}", self.lr));
        lines.push(format!("batch_size = {}", self.batch_size));
        lines.push(format!("epochs = {}", self.epochs));
        lines.push(format!("seed = {}", self.seed));
        for name in Switches::NAMES {
            let v = self.switches.get(name).expect("known switch");
            lines.push(format!("{name} = {}", on(v)));
        }
        lines.push(format!("precision = {}", self.precision));
        lines.push(format!("out = {}", self.out.display()));
        lines.join("\n") + "\n"
    }
}

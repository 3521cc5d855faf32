//! The work behind each subcommand, independent of argument parsing.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tcvae_core::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, Checkpoint};
use tcvae_core::dataio::{adf_statistic, make_windows_for, split_series, stamp_of, RawSeries};
use tcvae_core::eval::{rolling_evaluate, MeanBaseline, MetricReport, Persistence, Units};
use tcvae_core::latent::Draw;
use tcvae_core::train::{Dataset, FitReport};
use tcvae_numerics::{Precision, Tensor};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const CHECKPOINT_FILE: &str = "model.tcva";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const PRECISION_ENV: &str = "TCVAE_PRECISION";

/// Precision requested through the environment, if any.
pub fn precision_override() -> Result<Option<Precision>> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) if !v.trim().is_empty() => Ok(Some(v.parse()?)),
        _ => Ok(None),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub report: FitReport,
}

/// Trains on the configured data and writes the checkpoint, the per-epoch
/// loss trace and the effective configuration into `cfg.out`.
pub fn train(cfg: &RunConfig, precision: Precision, log: &mut dyn Write) -> Result<TrainOutcome> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("`data` is not set".into()))?;
    let series = tcvae_core::dataio::load_csv(data)?;
    let model_cfg = cfg.model_config(&series.variable_names)?;
    let train_cfg = cfg.train_config()?;
    let ds = Dataset::prepare(&series, cfg.split, cfg.window, cfg.horizon, &model_cfg.target_columns)?;
    let mut model = AnyModel::new(model_cfg, precision)?;
    model.set_scaler(ds.scaler.clone());
    let report = model.fit(&ds.train, ds.val.as_ref(), &train_cfg, |e| {
        let val = e.val_loss.map(|v| format!(" val_loss={v}")).unwrap_or_default();
        let _ = writeln!(log, "epoch={} loss={} steps={}{val}", e.epoch + 1, e.loss, e.steps);
    })?;

    ensure_dir(&cfg.out)?;
    let mut run = cfg.clone();
    run.precision = precision.as_str().to_string();
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let ck = Checkpoint {
        model,
        train: Some(train_cfg),
        run: Some(serde_json::to_value(&run).map_err(|e| CliError::Config(e.to_string()))?),
    };
    save_checkpoint(&ck, &checkpoint)?;
    let loss_trace = cfg.out.join(LOSS_TRACE_FILE);
    write_file(&loss_trace, loss_trace_csv(&report))?;
    write_file(&cfg.out.join(CONFIG_ECHO_FILE), run.to_text())?;
    Ok(TrainOutcome {
        checkpoint,
        loss_trace,
        report,
    })
}

pub fn loss_trace_csv(report: &FitReport) -> String {
    let mut s = String::from("epoch,loss,reconstruction,forecasting,kl,val_loss\n");
    for e in &report.epochs {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch + 1,
            e.loss,
            e.reconstruction,
            e.forecasting,
            e.kl,
            val
        ));
    }
    s
}

/// Loads a checkpoint, casting it when a precision is requested.
pub fn load_model(path: &Path, precision: Option<Precision>) -> Result<Checkpoint> {
    let mut ck = load_checkpoint(path)?;
    if let Some(p) = precision {
        ck.model = ck.model.with_precision(p)?;
    }
    Ok(ck)
}

/// The run configuration stored with a checkpoint, or the defaults.
pub fn run_config(ck: &Checkpoint) -> RunConfig {
    ck.run
        .as_ref()
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

fn check_columns(model: &AnyModel, series: &RawSeries) -> Result<()> {
    let expected = model.config().input_dim;
    if series.dim() != expected {
        return Err(CliError::Config(format!(
            "data has {} variables, the model was trained on {expected}",
            series.dim()
        )));
    }
    Ok(())
}

/// Forecast of the `h` steps following the end of `series`, in raw units,
/// with the input schema restricted to the target columns.
pub fn forecast(ck: &Checkpoint, series: &RawSeries, seed: u64) -> Result<RawSeries> {
    check_columns(&ck.model, series)?;
    let c = ck.model.config();
    if series.len() < c.window {
        return Err(CliError::Core(tcvae_core::CoreError::TooShort {
            rows: series.len(),
            needed: c.window,
        }));
    }
    let window = series.slice(series.len() - c.window, series.len());
    let step = series.interval();
    let last = *series.timestamps.last().expect("non-empty series");
    let future: Vec<_> = (1..=c.horizon as i32).map(|i| last + step * i).collect();
    let input_stamps: Vec<_> = window.timestamps.iter().map(stamp_of).collect();
    let target_stamps: Vec<_> = future.iter().map(stamp_of).collect();
    let pred = ck
        .model
        .forecast(&window.values, &input_stamps, &target_stamps, Draw::Sample(seed))?;
    Ok(RawSeries {
        values: pred,
        timestamps: future,
        variable_names: c.target_columns.iter().map(|&j| series.variable_names[j].clone()).collect(),
    })
}

/// Normalised test split of `series` under the checkpoint's split ratios.
fn test_split(ck: &Checkpoint, series: &RawSeries) -> Result<RawSeries> {
    check_columns(&ck.model, series)?;
    let split = split_series(series, run_config(ck).split)?;
    let scaler = ck
        .model
        .scaler()
        .ok_or_else(|| CliError::Config("checkpoint has no scaler".into()))?;
    Ok(scaler.transform(&split.test))
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub units: &'static str,
    pub windows: usize,
    pub model: MetricReport,
    pub persistence: MetricReport,
    pub mean: MetricReport,
}

impl Evaluation {
    pub fn to_key_value(&self) -> String {
        let mut s = format!("units={}\nwindows={}\n", self.units, self.windows);
        for (prefix, r) in [("model", &self.model), ("persistence", &self.persistence), ("mean", &self.mean)] {
            for line in r.to_key_value().lines() {
                s.push_str(&format!("{prefix}.{line}\n"));
            }
        }
        s
    }
}

/// Rolling evaluation of the model and both baselines on the test split.
pub fn evaluate(ck: &Checkpoint, series: &RawSeries, raw_units: bool, seed: u64) -> Result<Evaluation> {
    let test = test_split(ck, series)?;
    let c = ck.model.config();
    let scaler = ck.model.scaler().expect("checked by test_split");
    let units = if raw_units { Units::Raw(scaler) } else { Units::AsGiven };
    let run = |f: &dyn tcvae_core::eval::Forecaster| {
        rolling_evaluate(f, &test, c.window, c.horizon, &c.target_columns, seed, units)
    };
    let model = run(&ck.model)?;
    let persistence = run(&Persistence)?;
    let mean = run(&MeanBaseline)?;
    Ok(Evaluation {
        units: if raw_units { "raw" } else { "normalized" },
        windows: model.windows.len(),
        model: model.report,
        persistence: persistence.report,
        mean: mean.report,
    })
}

/// Writes `metrics.json` and `metrics.txt` into `dir`.
pub fn write_metrics(ev: &Evaluation, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let json = dir.join(METRICS_JSON_FILE);
    let text = dir.join(METRICS_TEXT_FILE);
    let body = serde_json::to_string_pretty(ev).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&json, body + "\n")?;
    write_file(&text, ev.to_key_value())?;
    Ok((json, text))
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftStats {
    pub variables: Vec<(String, f64)>,
    pub average: f64,
}

impl DriftStats {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (name, v) in &self.variables {
            s.push_str(&format!("adf.{name}={v}\n"));
        }
        s.push_str(&format!("adf.average={}\n", self.average));
        s
    }
}

/// ADF statistic of every variable and their average.
pub fn drift_stats(series: &RawSeries) -> Result<DriftStats> {
    let variables = (0..series.dim())
        .map(|j| Ok((series.variable_names[j].clone(), adf_statistic(&series.column(j))?)))
        .collect::<Result<Vec<_>>>()?;
    let average = variables.iter().map(|(_, v)| v).sum::<f64>() / variables.len().max(1) as f64;
    Ok(DriftStats { variables, average })
}

/// CSV of test window `index` in raw units: the input steps with their
/// observed values, then the horizon steps with observed and predicted
/// values of every target.
pub fn plot_data(ck: &Checkpoint, series: &RawSeries, index: usize, seed: u64) -> Result<String> {
    let test = test_split(ck, series)?;
    let c = ck.model.config();
    let windows = make_windows_for(&test, c.window, c.horizon, &c.target_columns)?;
    if index >= windows.len() {
        return Err(CliError::Config(format!(
            "window index {index} out of range; the test split has {} windows",
            windows.len()
        )));
    }
    let one = windows.select(&[index]);
    let pred = ck.model.predict(&one, Draw::Sample(seed))?;
    let scaler = ck.model.scaler().expect("checked by test_split");
    let pred = scaler.inverse_columns(&pred, &c.target_columns);
    let truth = scaler.inverse_columns(&one.targets, &c.target_columns);
    let inputs = scaler.inverse(&one.inputs.clone().reshape(&[c.window, c.input_dim])?);

    let names: Vec<&str> = c.target_columns.iter().map(|&j| series.variable_names[j].as_str()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Config(e.to_string());
    let mut header = vec!["timestamp".to_string(), "segment".to_string()];
    for n in &names {
        header.push(format!("{n}_actual"));
        header.push(format!("{n}_predicted"));
    }
    w.write_record(&header).map_err(csv_err)?;
    let start = one.starts[0];
    let fmt = |t: usize| test.timestamps[t].format("%Y-%m-%d %H:%M:%S").to_string();
    for t in 0..c.window {
        let mut row = vec![fmt(start + t), "input".to_string()];
        for &j in &c.target_columns {
            row.push(format!("{:?}", inputs.at(&[t, j])));
            row.push(String::new());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let cell = |x: &Tensor<f64>, s: usize, k: usize| format!("{:?}", x.at(&[0, s, k]));
    for s in 0..c.horizon {
        let mut row = vec![fmt(start + c.window + s), "horizon".to_string()];
        for k in 0..names.len() {
            row.push(cell(&truth, s, k));
            row.push(cell(&pred, s, k));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

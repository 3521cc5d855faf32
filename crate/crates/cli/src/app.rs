//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use tcvae_core::dataio::{load_csv, write_csv};

use crate::commands;
use crate::config::{RunConfig, KEYS};
use crate::error::{io_err, CliError, Result};

/// Exit status for a command that ran and failed.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for unparseable arguments.
pub const EXIT_USAGE: i32 = 2;

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("N")
        .value_parser(clap::value_parser!(u64))
        .help("Seed for latent sampling")
}

pub fn command() -> Command {
    let mut train = Command::new("train")
        .about("Train a model and write a checkpoint")
        .arg(path_arg("config", "Run configuration file"));
    for key in KEYS {
        let mut arg = Arg::new(key).long(key).value_name("VALUE").help(format!("Overrides `{key}`"));
        if key.contains('_') {
            arg = arg.alias(key.replace('_', "-"));
        }
        train = train.arg(arg);
    }
    Command::new("tcvae")
        .about("Drift-adaptive multivariate time-series forecasting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(train)
        .subcommand(
            Command::new("forecast")
                .about("Forecast the steps after the end of a series")
                .arg(path_arg("checkpoint", "Checkpoint file").required(true))
                .arg(path_arg("data", "Input CSV").required(true))
                .arg(path_arg("out", "Output CSV").required(true))
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Rolling evaluation on the test split")
                .arg(path_arg("checkpoint", "Checkpoint file").required(true))
                .arg(path_arg("data", "Input CSV").required(true))
                .arg(path_arg("out", "Directory for metrics files; defaults to the checkpoint's"))
                .arg(
                    Arg::new("raw-units")
                        .long("raw-units")
                        .action(ArgAction::SetTrue)
                        .help("Report metrics in the data's original units"),
                )
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("drift-stats")
                .about("ADF statistic of every variable")
                .arg(path_arg("data", "Input CSV").required(true)),
        )
        .subcommand(
            Command::new("plot-data")
                .about("Actual and predicted values of one test window as CSV")
                .arg(path_arg("checkpoint", "Checkpoint file").required(true))
                .arg(path_arg("data", "Input CSV").required(true))
                .arg(
                    Arg::new("window-index")
                        .long("window-index")
                        .value_name("K")
                        .required(true)
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(path_arg("out", "Output CSV; stdout when omitted"))
                .arg(seed_arg()),
        )
}

/// Parses `args` and runs the chosen command, returning the exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(&matches, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn seed(m: &ArgMatches) -> u64 {
    m.get_one::<u64>("seed").copied().unwrap_or(0)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by the parser")
}

fn dispatch(matches: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let precision = commands::precision_override()?;
    let print = |out: &mut dyn Write, text: &str| out.write_all(text.as_bytes()).map_err(io_err("<stdout>"));
    match matches.subcommand() {
        Some(("train", m)) => {
            let mut cfg = match m.get_one::<PathBuf>("config") {
                Some(p) => RunConfig::parse(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
                None => RunConfig::default(),
            };
            for key in KEYS {
                if let Some(v) = m.get_one::<String>(key) {
                    cfg.set(key, v)?;
                }
            }
            let p = match precision {
                Some(p) => p,
                None => cfg.precision()?,
            };
            let done = commands::train(&cfg, p, err)?;
            print(out, &format!("checkpoint={}\nloss_trace={}\n", done.checkpoint.display(), done.loss_trace.display()))
        }
        Some(("forecast", m)) => {
            let ck = commands::load_model(path(m, "checkpoint"), precision)?;
            let series = load_csv(path(m, "data"))?;
            let fc = commands::forecast(&ck, &series, seed(m))?;
            write_csv(&fc, path(m, "out"))?;
            print(out, &format!("forecast={}\n", path(m, "out").display()))
        }
        Some(("evaluate", m)) => {
            let ckpt = path(m, "checkpoint");
            let ck = commands::load_model(ckpt, precision)?;
            let series = load_csv(path(m, "data"))?;
            let ev = commands::evaluate(&ck, &series, m.get_flag("raw-units"), seed(m))?;
            let dir = match m.get_one::<PathBuf>("out") {
                Some(d) => d.clone(),
                None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            commands::write_metrics(&ev, &dir)?;
            print(out, &ev.to_key_value())
        }
        Some(("drift-stats", m)) => {
            let series = load_csv(path(m, "data"))?;
            print(out, &commands::drift_stats(&series)?.to_key_value())
        }
        Some(("plot-data", m)) => {
            let ck = commands::load_model(path(m, "checkpoint"), precision)?;
            let series = load_csv(path(m, "data"))?;
            let k = *m.get_one::<usize>("window-index").expect("required by the parser");
            let csv = commands::plot_data(&ck, &series, k, seed(m))?;
            match m.get_one::<PathBuf>("out") {
                Some(p) => std::fs::write(p, csv).map_err(io_err(p)),
                None => print(out, &csv),
            }
        }
        _ => Err(CliError::Config("no command given".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn every_key_is_a_train_flag() {
        let cmd = command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in KEYS {
            assert!(train.get_arguments().any(|a| a.get_long() == Some(key)), "{key}");
        }
    }
}

//! `cnode`: runs characteristic neural ODE experiments and writes their
//! metrics, manifest and checkpoint under `out/<run-id>/`.

mod commands;
mod config;
mod error;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use crate::commands::{dispatch, Ctx};
use crate::config::{RunConfig, COMMANDS};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "cnode", version, about = "Characteristic neural ODE experiments")]
struct Cli {
    /// Experiment to run.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(COMMANDS))]
    command: Option<String>,
    /// Run configuration in `[section]` / `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["adjoint", "discrete"])]
    grad_mode: Option<String>,
    #[arg(long, value_parser = ["euler", "rk4", "dopri5"])]
    solver: Option<String>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    /// Characteristic dimension.
    #[arg(long)]
    k: Option<usize>,
    /// Worker threads. Summation order across threads may perturb the last digits.
    #[arg(long)]
    parallel: Option<usize>,
    /// `solve`: built-in system (decay, oscillator, logistic).
    #[arg(long)]
    dynamics: Option<String>,
    /// `solve`: end time.
    #[arg(long)]
    t: Option<f64>,
    /// Any config key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(cli: &Cli) -> CliResult<(String, RunConfig)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut put = |key: &str, value: Option<String>| -> CliResult<()> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    put("run.command", cli.command.clone())?;
    put("run.seed", cli.seed.map(|v| v.to_string()))?;
    put("run.out", cli.out.as_ref().map(|p| p.display().to_string()))?;
    put("run.parallel", cli.parallel.map(|v| v.to_string()))?;
    put("train.grad_mode", cli.grad_mode.clone())?;
    put("solver.method", cli.solver.clone())?;
    put("solver.rtol", cli.rtol.map(|v| v.to_string()))?;
    put("solver.atol", cli.atol.map(|v| v.to_string()))?;
    put("model.k", cli.k.map(|v| v.to_string()))?;
    put("task.dynamics", cli.dynamics.clone())?;
    put("task.t", cli.t.map(|v| v.to_string()))?;
    for item in &cli.set {
        let (k, v) = item.split_once('=').ok_or_else(|| {
            config::ConfigError::BadValue {
                line: None,
                key: item.clone(),
                value: String::new(),
                expected: "`section.key=value`".into(),
            }
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    let command = cfg.require::<String>("run.command")?;
    Ok((command, cfg))
}

fn execute(cli: &Cli) -> CliResult<()> {
    let (command, mut cfg) = build_config(cli)?;
    let seed: u64 = cfg.get("run.seed", 0)?;
    let out: String = cfg.get("run.out", "out".to_string())?;
    let threads: usize = cfg.get("run.parallel", 1)?;
    if threads == 0 {
        return Err(config::ConfigError::BadValue {
            line: None,
            key: "run.parallel".into(),
            value: "0".into(),
            expected: "at least one thread".into(),
        }
        .into());
    }
    if threads > 1 {
        eprintln!(
            "warning: running on {threads} threads; summation order may perturb the last digits"
        );
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    let dir = RunDir::create(&PathBuf::from(out), &command, seed)?;
    let mut ctx = Ctx {
        cfg: &mut cfg,
        dir: &dir,
        seed,
        parallel: threads > 1,
    };
    let outcome = dispatch(&command, &mut ctx).inspect_err(|_| {
        let _ = std::fs::remove_dir(&dir.path);
    })?;
    let manifest = dir.finish(&command, seed, &cfg, &outcome)?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

fn run(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rwmeta::config::{Baseline, ExperimentConfig};
use rwmeta::harness;
use rwmeta::Error;

/// Meta-learning with MAML and reweighted MAML.
///
/// Any `--section.key=value` argument overrides the matching config entry.
#[derive(Parser, Debug)]
#[command(name = "rwmeta", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train plain MAML (or the skyline with `--run.baseline=skyline`).
    TrainMaml(Common),
    /// Train reweighted MAML.
    TrainRwmaml(Common),
    /// One run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key to vary, e.g. `pool.ood_ratio`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Compare the analytic gradients against finite differences.
    Gradcheck(Common),
    /// Evaluate stored parameters on the test tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<run.out_dir>/params.json`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Splits `--a.b=value` (and `--seed=value`) overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if key.contains('.') || key == "seed" => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn load(common: &Common, overrides: &[String]) -> rwmeta::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[String]) -> rwmeta::Result<()> {
    match cli.cmd {
        Cmd::TrainMaml(c) => {
            let mut cfg = load(&c, overrides)?;
            if cfg.run.baseline == Baseline::Rwmaml {
                cfg.run.baseline = Baseline::Maml;
            }
            let s = harness::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::TrainRwmaml(c) => {
            let mut cfg = load(&c, overrides)?;
            cfg.run.baseline = Baseline::Rwmaml;
            let s = harness::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Sweep { common, axis, values } => {
            let cfg = load(&common, overrides)?;
            let rows = harness::run_sweep(&cfg, &axis, &values)?;
            println!("{axis},final_test_metric,train_seconds");
            for r in rows {
                println!("{},{},{}", r.value, r.final_test_metric, r.train_seconds);
            }
        }
        Cmd::Gradcheck(c) => {
            let cfg = load(&c, overrides)?;
            let report = harness::gradcheck(&cfg)?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::Format("gradient check failed".into()));
            }
        }
        Cmd::Eval { common, params } => {
            let cfg = load(&common, overrides)?;
            let path = params.unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir).join("params.json"));
            let p = harness::read_params(&path)?;
            println!("{}", harness::eval(&cfg, &p)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::UnsupportedConfig(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}

//! Batch experiment harness. Exit codes: 0 success, 1 configuration
//! error, 2 numerical failure, 3 acceptance-threshold failure.

use clap::{Parser, Subcommand};
use quadadapt::cli::{self, CliError, TrackSettings};
use quadadapt::config::ExperimentConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "quadadapt",
    about = "Learned quadrotor dynamics with online low-rank adaptation and predictive tracking control",
    version
)]
struct Args {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set sim.disturbance.payload_mass=0.35
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (shorthand for --set paths.out_dir=...).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation datasets with the simulator.
    Datagen,
    /// Train the incremental dynamics model offline.
    Train,
    /// Evaluate open-loop prediction RMSE at the control horizon.
    Eval {
        /// Enforce the prediction-quality thresholds (exit 3 on failure).
        #[arg(long)]
        check: bool,
    },
    /// Run the closed-loop tracking experiment.
    Track {
        /// Enable online adaptation (on|off).
        #[arg(long, default_value = "off")]
        adapt: String,
        /// Payload mass [kg] overriding the config.
        #[arg(long)]
        payload: Option<f64>,
        /// Reference kind (hover|circle|lemniscate) overriding the config.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Extract plot-ready CSV bundles from a control log.
    Plotdata {
        /// Control log produced by `track`.
        #[arg(long)]
        log: PathBuf,
        /// Output directory for the bundles.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full chain: datagen, train, eval, tracking on both references with
    /// adaptation off/on, combined summary.
    Repro {
        /// Enforce all experiment thresholds (exit 3 on failure).
        #[arg(long)]
        check: bool,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    quadadapt::config::ConfigError::Override {
                        key: s.clone(),
                        msg: "expected KEY=VALUE".into(),
                    }
                    .into()
                })
        })
        .collect()
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    let mut overrides = parse_overrides(&args.overrides)?;
    if let Some(out) = &args.out {
        overrides.push(("paths.out_dir".into(), format!("\"{}\"", out.display())));
    }
    cfg.apply_overrides(&overrides)?;

    match args.command {
        Command::Datagen => cli::cmd_datagen(&cfg),
        Command::Train => cli::cmd_train(&cfg).map(|_| ()),
        Command::Eval { check } => cli::cmd_eval(&cfg, check).map(|_| ()),
        Command::Track { adapt, payload, reference } => {
            let adapt_enabled = match adapt.as_str() {
                "on" => true,
                "off" => false,
                other => {
                    return Err(quadadapt::config::ConfigError::Validation(format!(
                        "--adapt must be on|off, got {other:?}"
                    ))
                    .into())
                }
            };
            if let Some(p) = payload {
                cfg.apply_overrides(&[("sim.disturbance.payload_mass".into(), p.to_string())])?;
            }
            if let Some(r) = reference {
                cfg.apply_overrides(&[("sim.reference".into(), r)])?;
            }
            let settings = TrackSettings::from_config(&cfg, adapt_enabled);
            cli::cmd_track(&cfg, &settings).map(|_| ())
        }
        Command::Plotdata { log, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("plotdata"));
            cli::cmd_plotdata(&log, &out)
        }
        Command::Repro { check } => cli::cmd_repro(&cfg, check).map(|_| ()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Err(err) = run(args) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

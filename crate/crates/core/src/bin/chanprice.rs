use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use chanprice::cli::{self, Mode, RunOptions, ScheduleKind};
use chanprice::Error;

/// Solve and simulate the channel pricing / selection game.
#[derive(Debug, Parser)]
#[command(name = "chanprice", version)]
struct Args {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,

    /// Directory for CSV and JSON artifacts (created if missing).
    #[arg(long)]
    out: PathBuf,

    /// ladder | client | server | equilibrium | simulate. Defaults to the
    /// config's `mode` key.
    #[arg(long)]
    mode: Option<String>,

    /// constant-WL | constant-WH | constant-W0 | server (client and simulate modes).
    #[arg(long = "price-schedule", default_value = "constant-WL")]
    price_schedule: String,

    /// discrete | continuous: how the server thresholds account for later
    /// stages.
    #[arg(long, default_value = "discrete")]
    pricing: String,

    /// Override `sim.runs`.
    #[arg(long)]
    runs: Option<usize>,

    /// Override `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> anyhow::Result<()> {
    let config = cli::load_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let mode = match (&args.mode, config.mode) {
        (Some(m), _) => m.parse::<Mode>()?,
        (None, Some(m)) => m,
        (None, None) => anyhow::bail!("no mode given: pass --mode or set `mode` in the config"),
    };
    let schedule: ScheduleKind = args.price_schedule.parse()?;
    let opts = RunOptions {
        mode,
        schedule,
        pricing: args.pricing.parse()?,
        runs: args.runs,
        seed: args.seed,
    };
    cli::run(&config, opts, &args.out)
        .with_context(|| format!("{} stage failed", mode.as_str()))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::Config(_) | Error::Parse { .. })
                )
            });
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

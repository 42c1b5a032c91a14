//! Config ingestion and artifact emission for the `chanprice` binary.
//!
//! A run reads one strict-schema JSON config, executes a pipeline stage and
//! writes CSV tables plus `summary.json` into an output directory. Outputs
//! depend only on the config, mode, schedule and seed, so repeated runs are
//! byte-identical; wall-clock timings are logged, never written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::client::{value_iteration, ClientSolution, GameConfig, PriceSchedule};
use crate::error::{Error, Result};
use crate::estimation::{solve_ladder, CovarianceLadder, Observability, SteadyState, SystemModel};
use crate::matrix::Matrix;
use crate::server::{solve_server_with, verify_leader_consistency, PricingMode, ServerSolution};
use crate::sim::{simulate, SimConfig, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ladder,
    Client,
    Server,
    Equilibrium,
    Simulate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ladder => "ladder",
            Mode::Client => "client",
            Mode::Server => "server",
            Mode::Equilibrium => "equilibrium",
            Mode::Simulate => "simulate",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(Mode::Ladder),
            "client" => Ok(Mode::Client),
            "server" => Ok(Mode::Server),
            "equilibrium" => Ok(Mode::Equilibrium),
            "simulate" => Ok(Mode::Simulate),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected ladder, client, server, equilibrium or simulate)"
            ))),
        }
    }
}

/// Which premium-channel prices the client faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    ConstantWl,
    ConstantWh,
    ConstantW0,
    /// The leader's discrete two-price policy.
    Server,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::ConstantWl => "constant-WL",
            ScheduleKind::ConstantWh => "constant-WH",
            ScheduleKind::ConstantW0 => "constant-W0",
            ScheduleKind::Server => "server",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-WL" => Ok(ScheduleKind::ConstantWl),
            "constant-WH" => Ok(ScheduleKind::ConstantWh),
            "constant-W0" => Ok(ScheduleKind::ConstantW0),
            "server" => Ok(ScheduleKind::Server),
            other => Err(Error::config(format!(
                "unknown price schedule `{other}` (expected constant-WL, constant-WH, constant-W0 or server)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "C")]
    pub c: Matrix,
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "R")]
    pub r: Matrix,
    #[serde(rename = "Pi0", default, skip_serializing_if = "Option::is_none")]
    pub pi0: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    #[serde(rename = "W0")]
    pub w0: f64,
    #[serde(rename = "WL")]
    pub wl: f64,
    #[serde(rename = "WH")]
    pub wh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub runs: usize,
    pub seed: u64,
}

/// On-disk experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub channels: ChannelSection,
    pub prices: PriceSection,
    pub zeta: f64,
    pub horizon: usize,
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
}

/// A config with every module-level invariant checked.
#[derive(Debug, Clone)]
pub struct Validated {
    pub model: SystemModel,
    pub game: GameConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<Validated> {
        let s = &self.system;
        let model = SystemModel::new(
            s.a.clone(),
            s.c.clone(),
            s.q.clone(),
            s.r.clone(),
            s.pi0.clone(),
        )
        .map_err(|e| prefix("system", e))?;
        let game = GameConfig::new(
            self.channels.lambda1,
            self.channels.lambda2,
            self.prices.w0,
            self.prices.wl,
            self.prices.wh,
            self.zeta,
            self.horizon,
        )?;
        let sim = SimConfig::new(self.sim.runs, self.sim.seed);
        sim.validate(&game).map_err(|e| prefix("sim", e))?;
        Ok(Validated { model, game, sim })
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    RunConfig::from_json(&text)
}

/// Formats a number with 12 significant digits, trailing zeros trimmed.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..15).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn opt_index(i: Option<usize>) -> String {
    i.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ladder_csv(ladder: &CovarianceLadder) -> String {
    let mut out = String::from("state_index,trace\n");
    for (i, t) in ladder.traces().iter().enumerate() {
        writeln!(out, "{i},{}", fmt_num(*t)).unwrap();
    }
    out
}

pub fn client_policy_csv(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
    client: &ClientSolution,
) -> String {
    let mut out = String::from("stage,state_index,state_trace,price_posted,gamma_star,value\n");
    for k in 1..=cfg.horizon {
        for s in 0..=cfg.horizon {
            writeln!(
                out,
                "{k},{s},{},{},{},{}",
                fmt_num(ladder.trace(s)),
                fmt_num(prices.price(k, s)),
                u8::from(client.action(k, s)),
                fmt_num(client.value(k, s)),
            )
            .unwrap();
        }
    }
    out
}

pub fn server_policy_csv(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    server: &ServerSolution,
) -> String {
    let mut out = String::from(
        "stage,state_index,state_trace,W_star,discrete_price,any_flag,L_index,H_index\n",
    );
    for k in 1..=cfg.horizon {
        let regions = server
            .region_thresholds(k)
            .expect("discretized server policy");
        for s in 0..=cfg.horizon {
            let label = server.label(k, s).expect("discretized server policy");
            writeln!(
                out,
                "{k},{s},{},{},{},{},{},{}",
                fmt_num(ladder.trace(s)),
                fmt_num(server.w_star(k, s)),
                fmt_num(label.posted_price(cfg)),
                u8::from(label.is_any()),
                opt_index(regions.low),
                opt_index(regions.high),
            )
            .unwrap();
        }
    }
    out
}

pub fn sim_summary_csv(result: &SimResult) -> String {
    let mut out = String::from("metric,mean,std_error,runs\n");
    for (name, est) in [("JC", result.jc), ("JS", result.js)] {
        writeln!(
            out,
            "{name},{},{},{}",
            fmt_num(est.mean),
            fmt_num(est.std_error),
            result.runs
        )
        .unwrap();
    }
    out
}

/// Options for one invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub schedule: ScheduleKind,
    /// Threshold construction for the server and equilibrium modes and the
    /// `server` schedule.
    pub pricing: PricingMode,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            schedule: ScheduleKind::default(),
            pricing: PricingMode::default(),
            runs: None,
            seed: None,
        }
    }
}

fn schedule_for(
    kind: ScheduleKind,
    pricing: PricingMode,
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
) -> Result<(PriceSchedule, Option<ServerSolution>)> {
    Ok(match kind {
        ScheduleKind::ConstantWl => (PriceSchedule::constant(cfg.wl), None),
        ScheduleKind::ConstantWh => (PriceSchedule::constant(cfg.wh), None),
        ScheduleKind::ConstantW0 => (PriceSchedule::constant(cfg.w0), None),
        ScheduleKind::Server => {
            let server = solve_server_with(ladder, cfg, pricing)?;
            (server.discrete_schedule(cfg)?, Some(server))
        }
    })
}

fn observability_json(o: Observability) -> serde_json::Value {
    match o {
        Observability::Observable => json!({ "observable": true }),
        Observability::Detectable { rank } => {
            json!({ "observable": false, "detectable": true, "observability_rank": rank })
        }
    }
}

fn client_json(client: &ClientSolution) -> serde_json::Value {
    json!({
        "optimal_value": client.optimal_value(),
        "thresholds": client.thresholds(),
    })
}

fn sim_json(result: &SimResult) -> serde_json::Value {
    json!({
        "runs": result.runs,
        "JC": { "mean": result.jc.mean, "std_error": result.jc.std_error },
        "JS": { "mean": result.js.mean, "std_error": result.js.std_error },
    })
}

/// Executes one pipeline stage and writes its artifacts into `out_dir`.
/// Returns the summary that was written to `summary.json`.
pub fn run(config: &RunConfig, opts: RunOptions, out_dir: &Path) -> Result<serde_json::Value> {
    let mut config = config.clone();
    if let Some(runs) = opts.runs {
        config.sim.runs = runs;
    }
    if let Some(seed) = opts.seed {
        config.sim.seed = seed;
    }
    config.mode = Some(opts.mode);
    let Validated { model, game, sim } = config.validate()?;
    if let Observability::Detectable { rank } = model.observability() {
        log::warn!(
            "(A, C) is not observable (rank {rank} < {}); unobservable modes are stable, continuing",
            model.state_dim()
        );
    }
    fs::create_dir_all(out_dir)?;

    let started = Instant::now();
    let (steady, ladder): (SteadyState, CovarianceLadder) = solve_ladder(&model, game.horizon)?;
    log::info!(
        "steady state: residual {:e} after {} iterations ({:?})",
        steady.residual,
        steady.iterations,
        started.elapsed()
    );
    fs::write(out_dir.join("ladder.csv"), ladder_csv(&ladder))?;

    let mut summary = json!({
        "mode": opts.mode.as_str(),
        "pricing": opts.pricing.as_str(),
        "config": config,
        "steady_state": {
            "residual": steady.residual,
            "iterations": steady.iterations,
            "system": observability_json(model.observability()),
        },
        "traces": ladder.traces(),
    });

    let stage_start = Instant::now();
    match opts.mode {
        Mode::Ladder => {}
        Mode::Client | Mode::Simulate => {
            let (prices, server) = schedule_for(opts.schedule, opts.pricing, &ladder, &game)?;
            let client = value_iteration(&ladder, &game, &prices)?;
            fs::write(
                out_dir.join("client_policy.csv"),
                client_policy_csv(&ladder, &game, &prices, &client),
            )?;
            if let Some(server) = &server {
                fs::write(
                    out_dir.join("server_policy.csv"),
                    server_policy_csv(&ladder, &game, server),
                )?;
            }
            summary["price_schedule"] = json!(opts.schedule.as_str());
            summary["client"] = client_json(&client);
            if opts.mode == Mode::Simulate {
                let result = simulate(&ladder, &game, &client, &prices, &sim)?;
                fs::write(out_dir.join("sim_summary.csv"), sim_summary_csv(&result))?;
                summary["sim"] = sim_json(&result);
            }
        }
        Mode::Server | Mode::Equilibrium => {
            let server = solve_server_with(&ladder, &game, opts.pricing)?;
            fs::write(
                out_dir.join("server_policy.csv"),
                server_policy_csv(&ladder, &game, &server),
            )?;
            let report = verify_leader_consistency(&server, &ladder, &game)?;
            if !report.is_consistent() {
                log::warn!(
                    "follower best response departs from the discrete price regions at {} of {} (stage, state) pairs",
                    report.discrepancies.len(),
                    report.checked
                );
            }
            let regions: Vec<_> = (1..=game.horizon)
                .map(|k| {
                    let r = server.region_thresholds(k).expect("discretized");
                    json!({ "stage": k, "L_index": r.low, "H_index": r.high })
                })
                .collect();
            summary["server"] = json!({
                "region_thresholds": regions,
                "consistency_checked": report.checked,
                "consistency_discrepancies": report.discrepancies.len(),
            });
            if opts.mode == Mode::Equilibrium {
                let prices = server.discrete_schedule(&game)?;
                let client = report.client;
                fs::write(
                    out_dir.join("client_policy.csv"),
                    client_policy_csv(&ladder, &game, &prices, &client),
                )?;
                let result = simulate(&ladder, &game, &client, &prices, &sim)?;
                fs::write(out_dir.join("sim_summary.csv"), sim_summary_csv(&result))?;
                summary["price_schedule"] = json!(ScheduleKind::Server.as_str());
                summary["client"] = client_json(&client);
                summary["sim"] = sim_json(&result);
            }
        }
    }
    log::info!(
        "{} finished in {:?}",
        opts.mode.as_str(),
        stage_start.elapsed()
    );

    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(summary)
}

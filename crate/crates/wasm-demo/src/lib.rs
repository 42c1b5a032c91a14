//! WebAssembly bindings for the in-browser demo. Every export takes the same
//! JSON config the CLI reads and returns a JSON string; errors come back as
//! thrown strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use chanprice::cli::{RunConfig, ScheduleKind, Validated};
use chanprice::client::{value_iteration, PriceSchedule};
use chanprice::estimation::{solve_ladder, CovarianceLadder};
use chanprice::server::{solve_server_with, verify_leader_consistency, PricingMode};
use chanprice::sim::{simulate, SimConfig};
use chanprice::GameConfig;

fn load(config_json: &str) -> Result<(Validated, CovarianceLadder), String> {
    let config = RunConfig::from_json(config_json).map_err(|e| e.to_string())?;
    let v = config.validate().map_err(|e| e.to_string())?;
    let (_, ladder) = solve_ladder(&v.model, v.game.horizon).map_err(|e| e.to_string())?;
    Ok((v, ladder))
}

fn prices_for(
    kind: ScheduleKind,
    ladder: &CovarianceLadder,
    game: &GameConfig,
) -> Result<PriceSchedule, String> {
    Ok(match kind {
        ScheduleKind::ConstantWl => PriceSchedule::constant(game.wl),
        ScheduleKind::ConstantWh => PriceSchedule::constant(game.wh),
        ScheduleKind::ConstantW0 => PriceSchedule::constant(game.w0),
        ScheduleKind::Server => solve_server_with(ladder, game, PricingMode::Discrete)
            .and_then(|s| s.discrete_schedule(game))
            .map_err(|e| e.to_string())?,
    })
}

fn price_table(prices: &PriceSchedule, n: usize) -> Vec<Vec<f64>> {
    (1..=n)
        .map(|k| (0..=n).map(|s| prices.price(k, s)).collect())
        .collect()
}

/// Client value iteration under a named price schedule.
pub fn client_report(config_json: &str, schedule: &str) -> Result<String, String> {
    let (v, ladder) = load(config_json)?;
    let kind: ScheduleKind = schedule
        .parse()
        .map_err(|e: chanprice::Error| e.to_string())?;
    let prices = prices_for(kind, &ladder, &v.game)?;
    let sol = value_iteration(&ladder, &v.game, &prices).map_err(|e| e.to_string())?;
    let n = v.game.horizon;
    Ok(json!({
        "traces": ladder.traces(),
        "prices": price_table(&prices, n),
        "policy": (1..=n).map(|k| sol.policy_row(k).to_vec()).collect::<Vec<_>>(),
        "values": (1..=n).map(|k| sol.value_row(k).to_vec()).collect::<Vec<_>>(),
        "thresholds": sol.thresholds(),
        "optimal_value": sol.optimal_value(),
    })
    .to_string())
}

/// Server thresholds, discrete labels and the follower check.
pub fn server_report(config_json: &str, pricing: &str) -> Result<String, String> {
    let (v, ladder) = load(config_json)?;
    let mode: PricingMode = pricing
        .parse()
        .map_err(|e: chanprice::Error| e.to_string())?;
    let server = solve_server_with(&ladder, &v.game, mode).map_err(|e| e.to_string())?;
    let report = verify_leader_consistency(&server, &ladder, &v.game).map_err(|e| e.to_string())?;
    let n = v.game.horizon;
    let regions: Vec<Value> = (1..=n)
        .map(|k| {
            let r = server.region_thresholds(k).expect("discretized");
            json!({ "low": r.low, "high": r.high })
        })
        .collect();
    Ok(json!({
        "traces": ladder.traces(),
        "w_star": (1..=n).map(|k| server.w_star_row(k).to_vec()).collect::<Vec<_>>(),
        "labels": (1..=n)
            .map(|k| server.label_row(k).expect("discretized").iter().map(|l| l.as_str()).collect())
            .collect::<Vec<Vec<&str>>>(),
        "regions": regions,
        "follower": (1..=n).map(|k| report.client.policy_row(k).to_vec()).collect::<Vec<_>>(),
        "discrepancies": report.discrepancies.len(),
        "checked": report.checked,
    })
    .to_string())
}

/// Monte Carlo run of the client's optimal policy under a price schedule.
pub fn simulation_report(
    config_json: &str,
    schedule: &str,
    runs: usize,
    seed: u64,
) -> Result<String, String> {
    let (v, ladder) = load(config_json)?;
    let kind: ScheduleKind = schedule
        .parse()
        .map_err(|e: chanprice::Error| e.to_string())?;
    let prices = prices_for(kind, &ladder, &v.game)?;
    let sol = value_iteration(&ladder, &v.game, &prices).map_err(|e| e.to_string())?;
    let result = simulate(&ladder, &v.game, &sol, &prices, &SimConfig::new(runs, seed))
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "runs": result.runs,
        "jc": { "mean": result.jc.mean, "std_error": result.jc.std_error },
        "js": { "mean": result.js.mean, "std_error": result.js.std_error },
        "predicted_jc": sol.optimal_value(),
        "occupancy": result.occupancy,
    })
    .to_string())
}

#[wasm_bindgen(js_name = solveClient)]
pub fn solve_client(config_json: &str, schedule: &str) -> Result<String, JsError> {
    client_report(config_json, schedule).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = solveServer)]
pub fn solve_server(config_json: &str, pricing: &str) -> Result<String, JsError> {
    server_report(config_json, pricing).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulate)]
pub fn run_simulation(
    config_json: &str,
    schedule: &str,
    runs: u32,
    seed: u32,
) -> Result<String, JsError> {
    simulation_report(config_json, schedule, runs as usize, u64::from(seed))
        .map_err(|e| JsError::new(&e))
}

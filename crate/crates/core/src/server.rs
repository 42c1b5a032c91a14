//! The leader's problem: how much can be charged for the premium channel at
//! each stage and state while the client still takes it.
//!
//! `W*_k(s)` is the client's indifference price at stage `k`, state `s`, given
//! what the leader charges afterwards; `U_k(s)` is the client's value along
//! that path. Both come out of one backward pass. Two pricing modes exist:
//!
//! - [`PricingMode::Continuous`]: any price `≥ W0` may be posted, the leader
//!   charges exactly `W*` at every later stage and the client is indifferent
//!   everywhere ([`backward_thresholds`]).
//! - [`PricingMode::Discrete`]: only `WL` and `WH` may be posted. Later stages
//!   are priced by the two-price rule, so the client keeps a surplus there and
//!   `W*` is computed against that continuation ([`discrete_thresholds`]).
//!
//! The two-price rule posts `WH` where `WH ≤ W*`, `WL` where `WL ≤ W* < WH`,
//! and flags the rest as states where no premium price is accepted.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::client::{value_iteration, ClientSolution, GameConfig, PriceSchedule};
use crate::error::{Error, Result};
use crate::estimation::CovarianceLadder;

const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PricingMode {
    Continuous,
    #[default]
    Discrete,
}

impl PricingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PricingMode::Continuous => "continuous",
            PricingMode::Discrete => "discrete",
        }
    }
}

impl fmt::Display for PricingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PricingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(PricingMode::Continuous),
            "discrete" => Ok(PricingMode::Discrete),
            other => Err(Error::config(format!(
                "unknown pricing mode {other:?} (expected continuous or discrete)"
            ))),
        }
    }
}

/// Discrete price posted by the leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriceLabel {
    /// `WH ≤ W*`: the high price is still accepted.
    High,
    /// `WL ≤ W* < WH`.
    Low,
    /// `W* < WL`: the client declines at either price. Posted as `WH`.
    Any,
}

impl PriceLabel {
    /// Price actually posted for this label.
    pub fn posted_price(self, cfg: &GameConfig) -> f64 {
        match self {
            PriceLabel::High | PriceLabel::Any => cfg.wh,
            PriceLabel::Low => cfg.wl,
        }
    }

    pub fn is_any(self) -> bool {
        self == PriceLabel::Any
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PriceLabel::High => "WH",
            PriceLabel::Low => "WL",
            PriceLabel::Any => "ANY",
        }
    }
}

impl fmt::Display for PriceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-stage state indices where the discrete policy switches: the first
/// state priced `WL` or higher and the first state priced `WH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub low: Option<usize>,
    pub high: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSolution {
    /// `w_star[k - 1][s]`, stages `1..=N`.
    w_star: Vec<Vec<f64>>,
    /// `u[k - 1][s]`, stages `1..=N+1`; the last row is zero.
    u: Vec<Vec<f64>>,
    /// Empty until [`discretize_policy`] runs.
    discrete: Vec<Vec<PriceLabel>>,
    region_thresholds: Vec<RegionThresholds>,
}

impl ServerSolution {
    pub fn horizon(&self) -> usize {
        self.w_star.len()
    }

    pub fn w_star(&self, stage: usize, state: usize) -> f64 {
        self.w_star[stage - 1][state]
    }

    pub fn w_star_row(&self, stage: usize) -> &[f64] {
        &self.w_star[stage - 1]
    }

    /// `U_k(s)` for `k` in `1..=N+1`.
    pub fn u(&self, stage: usize, state: usize) -> f64 {
        self.u[stage - 1][state]
    }

    pub fn u_row(&self, stage: usize) -> &[f64] {
        &self.u[stage - 1]
    }

    pub fn is_discretized(&self) -> bool {
        !self.discrete.is_empty()
    }

    pub fn label(&self, stage: usize, state: usize) -> Option<PriceLabel> {
        self.discrete.get(stage - 1).map(|row| row[state])
    }

    pub fn label_row(&self, stage: usize) -> Option<&[PriceLabel]> {
        self.discrete.get(stage - 1).map(Vec::as_slice)
    }

    pub fn region_thresholds(&self, stage: usize) -> Option<RegionThresholds> {
        self.region_thresholds.get(stage - 1).copied()
    }

    /// Prices posted under the discrete rule, as a schedule for the client.
    pub fn discrete_schedule(&self, cfg: &GameConfig) -> Result<PriceSchedule> {
        if !self.is_discretized() {
            return Err(Error::config("server policy has not been discretized"));
        }
        Ok(PriceSchedule::Table(
            self.discrete
                .iter()
                .map(|row| row.iter().map(|l| l.posted_price(cfg)).collect())
                .collect(),
        ))
    }

    /// The continuous threshold prices as a schedule.
    pub fn threshold_schedule(&self) -> PriceSchedule {
        PriceSchedule::Table(self.w_star.clone())
    }
}

/// Highest price at the last stage that still makes the client take the
/// premium channel: `W0 + ζ/(1−ζ)(λ1 − λ2)(Tr{h(P)} − Tr{P̄})`.
pub fn terminal_threshold(state: usize, ladder: &CovarianceLadder, cfg: &GameConfig) -> f64 {
    let gain = ladder.trace(ladder.successor(state)) - ladder.trace(0);
    cfg.w0 + cfg.zeta / (1.0 - cfg.zeta) * cfg.quality_gap() * gain
}

/// Backward pass for `W*_k` and `U_k`, with the client accepting at the
/// threshold price. Checks `W*` rows are nondecreasing and at least `W0`,
/// and `U` rows nonincreasing.
pub fn backward_thresholds(ladder: &CovarianceLadder, cfg: &GameConfig) -> Result<ServerSolution> {
    check_inputs(ladder, cfg)?;
    let n = cfg.horizon;
    let states = n + 1;
    let gap = cfg.quality_gap();
    let zeta = cfg.zeta;
    let t0 = ladder.trace(0);

    let mut u = vec![vec![0.0; states]; n + 1];
    let mut w_star = vec![vec![0.0; states]; n];
    for k in (1..=n).rev() {
        let (done, todo) = u.split_at_mut(k);
        let next = &todo[0];
        for s in 0..states {
            let succ = ladder.successor(s);
            let ts = ladder.trace(succ);
            let w = cfg.w0 + gap / (1.0 - zeta) * (zeta * (ts - t0) + (next[0] - next[succ]));
            w_star[k - 1][s] = w;
            done[k - 1][s] = -(zeta * (cfg.lambda1 * t0 + (1.0 - cfg.lambda1) * ts)
                + (1.0 - zeta) * w)
                + cfg.lambda1 * next[0]
                + (1.0 - cfg.lambda1) * next[succ];
        }
    }

    let solution = ServerSolution {
        w_star,
        u,
        discrete: Vec::new(),
        region_thresholds: Vec::new(),
    };
    check_server_invariants(&solution, cfg)?;
    Ok(solution)
}

/// Backward pass for the two-price game. At each stage `W*` is the client's
/// indifference price given the discrete prices already fixed for later
/// stages, the stage is labelled with [`label_for`], and `U` is the client's
/// best-response value at the posted price. The result is already
/// discretized, and the client's best response to its price table agrees with
/// the labels by construction.
pub fn discrete_thresholds(ladder: &CovarianceLadder, cfg: &GameConfig) -> Result<ServerSolution> {
    check_inputs(ladder, cfg)?;
    let n = cfg.horizon;
    let states = n + 1;
    let gap = cfg.quality_gap();
    let zeta = cfg.zeta;
    let t0 = ladder.trace(0);

    let mut u = vec![vec![0.0; states]; n + 1];
    let mut w_star = vec![vec![0.0; states]; n];
    let mut discrete = vec![vec![PriceLabel::Any; states]; n];
    for k in (1..=n).rev() {
        let (done, todo) = u.split_at_mut(k);
        let next = &todo[0];
        for s in 0..states {
            let succ = ladder.successor(s);
            let ts = ladder.trace(succ);
            let w = cfg.w0 + gap / (1.0 - zeta) * (zeta * (ts - t0) + (next[0] - next[succ]));
            let label = label_for(w, cfg);
            let q = |reset: f64, cost: f64| {
                -(zeta * (reset * t0 + (1.0 - reset) * ts) + (1.0 - zeta) * cost)
                    + reset * next[0]
                    + (1.0 - reset) * next[succ]
            };
            let accept = q(cfg.lambda1, label.posted_price(cfg));
            let decline = q(cfg.lambda2, cfg.w0);
            w_star[k - 1][s] = w;
            discrete[k - 1][s] = label;
            done[k - 1][s] = if label.is_any() { decline } else { accept };
            debug_assert!(label.is_any() || accept >= decline - 1e-9 * (1.0 + decline.abs()));
        }
    }

    let region_thresholds = region_thresholds_of(&w_star, cfg);
    let solution = ServerSolution {
        w_star,
        u,
        discrete,
        region_thresholds,
    };
    check_server_invariants(&solution, cfg)?;
    Ok(solution)
}

fn check_inputs(ladder: &CovarianceLadder, cfg: &GameConfig) -> Result<()> {
    cfg.validate()?;
    let n = cfg.horizon;
    if ladder.max_index() < n {
        return Err(Error::config(format!(
            "ladder has {} rungs, horizon {n} needs {}",
            ladder.traces().len(),
            n + 1
        )));
    }
    Ok(())
}

pub fn check_server_invariants(solution: &ServerSolution, cfg: &GameConfig) -> Result<()> {
    for k in 1..=solution.horizon() {
        let row = solution.w_star_row(k);
        for (s, &w) in row.iter().enumerate() {
            if w < cfg.w0 - MONOTONE_SLACK * (1.0 + cfg.w0.abs()) {
                return Err(Error::Structural {
                    property: "threshold price at least W0",
                    stage: k,
                    state: s,
                    detail: format!("W* = {w} < W0 = {}", cfg.w0),
                });
            }
        }
        for (s, w) in row.windows(2).enumerate() {
            if w[1] < w[0] - MONOTONE_SLACK * (1.0 + w[0].abs()) {
                return Err(Error::Structural {
                    property: "threshold price nondecreasing in state",
                    stage: k,
                    state: s + 1,
                    detail: format!("W*({s}) = {} > W*({}) = {}", w[0], s + 1, w[1]),
                });
            }
        }
        for (s, w) in solution.u_row(k).windows(2).enumerate() {
            if w[1] > w[0] + MONOTONE_SLACK * (1.0 + w[0].abs()) {
                return Err(Error::Structural {
                    property: "leader-anticipated value nonincreasing in state",
                    stage: k,
                    state: s + 1,
                    detail: format!("U({s}) = {} < U({}) = {}", w[0], s + 1, w[1]),
                });
            }
        }
    }
    Ok(())
}

/// Maps a threshold price onto the two-price grid.
pub fn label_for(w_star: f64, cfg: &GameConfig) -> PriceLabel {
    if cfg.wh <= w_star {
        PriceLabel::High
    } else if cfg.wl <= w_star {
        PriceLabel::Low
    } else {
        PriceLabel::Any
    }
}

/// Fills the discrete price labels and per-stage region thresholds.
pub fn discretize_policy(solution: &ServerSolution, cfg: &GameConfig) -> ServerSolution {
    let discrete: Vec<Vec<PriceLabel>> = solution
        .w_star
        .iter()
        .map(|row| row.iter().map(|&w| label_for(w, cfg)).collect())
        .collect();
    ServerSolution {
        w_star: solution.w_star.clone(),
        u: solution.u.clone(),
        discrete,
        region_thresholds: region_thresholds_of(&solution.w_star, cfg),
    }
}

fn region_thresholds_of(w_star: &[Vec<f64>], cfg: &GameConfig) -> Vec<RegionThresholds> {
    w_star
        .iter()
        .map(|row| RegionThresholds {
            low: row.iter().position(|&w| cfg.wl <= w),
            high: row.iter().position(|&w| cfg.wh <= w),
        })
        .collect()
}

/// Threshold prices plus the discrete labels. In continuous mode the labels
/// are the two-price rule applied to the continuous thresholds.
pub fn solve_server_with(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    mode: PricingMode,
) -> Result<ServerSolution> {
    match mode {
        PricingMode::Continuous => Ok(discretize_policy(&backward_thresholds(ladder, cfg)?, cfg)),
        PricingMode::Discrete => discrete_thresholds(ladder, cfg),
    }
}

/// The leader's policy for the two-price game.
pub fn solve_server(ladder: &CovarianceLadder, cfg: &GameConfig) -> Result<ServerSolution> {
    solve_server_with(ladder, cfg, PricingMode::Discrete)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub stage: usize,
    pub state: usize,
    pub label: PriceLabel,
    pub posted_price: f64,
    pub w_star: f64,
    pub client_accepts: bool,
}

#[derive(Debug, Clone)]
pub struct LeaderConsistencyReport {
    /// The follower's best response to the discrete price table.
    pub client: ClientSolution,
    pub discrepancies: Vec<Discrepancy>,
    pub checked: usize,
}

impl LeaderConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Solves the follower's MDP under the posted discrete prices and compares:
/// the client should take the premium channel exactly on `WH`/`WL` states and
/// decline on `ANY` states.
pub fn verify_leader_consistency(
    server: &ServerSolution,
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
) -> Result<LeaderConsistencyReport> {
    let schedule = server.discrete_schedule(cfg)?;
    let client = value_iteration(ladder, cfg, &schedule)?;
    let mut discrepancies = Vec::new();
    let mut checked = 0;
    for k in 1..=cfg.horizon {
        for s in 0..=cfg.horizon {
            let label = server.label(k, s).expect("discretized");
            let accepts = client.action(k, s);
            checked += 1;
            if accepts == label.is_any() {
                discrepancies.push(Discrepancy {
                    stage: k,
                    state: s,
                    label,
                    posted_price: label.posted_price(cfg),
                    w_star: server.w_star(k, s),
                    client_accepts: accepts,
                });
            }
        }
    }
    Ok(LeaderConsistencyReport {
        client,
        discrepancies,
        checked,
    })
}

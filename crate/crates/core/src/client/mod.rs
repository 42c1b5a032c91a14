//! The follower's problem: pick a channel each stage to trade estimation
//! quality against price.
//!
//! States are ladder indices `0..=N` (index `i` stands for `Tr{h^i(P̄)}`),
//! actions are `false` (cheap channel 2) and `true` (premium channel 1).
//! A delivery resets the index to 0, a drop advances it by one rung, clamped
//! at `N`.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::CovarianceLadder;

pub use oracle::{brute_force_oracle, OracleResult, MAX_ORACLE_HORIZON};

/// Channel qualities, the price grid, the follower's weight and the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    /// Delivery probability of the premium channel.
    pub lambda1: f64,
    /// Delivery probability of the fixed-price channel.
    pub lambda2: f64,
    /// Price of the fixed-price channel.
    pub w0: f64,
    pub wl: f64,
    pub wh: f64,
    /// Weight on estimation error versus channel cost.
    pub zeta: f64,
    pub horizon: usize,
}

impl GameConfig {
    pub fn new(
        lambda1: f64,
        lambda2: f64,
        w0: f64,
        wl: f64,
        wh: f64,
        zeta: f64,
        horizon: usize,
    ) -> Result<Self> {
        let cfg = Self {
            lambda1,
            lambda2,
            w0,
            wl,
            wh,
            zeta,
            horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.w0,
            self.wl,
            self.wh,
            self.zeta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("game parameters must be finite"));
        }
        if !(self.lambda1 < 1.0) {
            return Err(Error::config("lambda1 must be below 1"));
        }
        if !(self.lambda1 > self.lambda2) {
            return Err(Error::config("lambda1 must exceed lambda2"));
        }
        if !(self.lambda2 > 0.0) {
            return Err(Error::config("lambda2 must be positive"));
        }
        if !(self.wh > self.wl) {
            return Err(Error::config("WH must exceed WL"));
        }
        if !(self.wl > self.w0) {
            return Err(Error::config("WL must exceed W0"));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::config("zeta must lie strictly between 0 and 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        Ok(())
    }

    /// `λ1 − λ2`.
    pub fn quality_gap(&self) -> f64 {
        self.lambda1 - self.lambda2
    }
}

/// Two-outcome transition law: `(P[reset to 0], P[advance one rung])`.
/// Depends on the action only.
pub fn kernel(premium: bool, cfg: &GameConfig) -> (f64, f64) {
    let reset = if premium { cfg.lambda1 } else { cfg.lambda2 };
    (reset, 1.0 - reset)
}

/// Price of the premium channel as a function of `(stage, state)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriceSchedule {
    Constant(f64),
    /// `table[k - 1][s]` is the price at stage `k`, state `s`.
    Table(Vec<Vec<f64>>),
}

impl PriceSchedule {
    pub fn constant(price: f64) -> Self {
        PriceSchedule::Constant(price)
    }

    pub fn price(&self, stage: usize, state: usize) -> f64 {
        match self {
            PriceSchedule::Constant(p) => *p,
            PriceSchedule::Table(t) => t[stage - 1][state],
        }
    }

    /// Whether the price at `stage` is the same for every state.
    pub fn is_state_constant(&self, stage: usize) -> bool {
        match self {
            PriceSchedule::Constant(_) => true,
            PriceSchedule::Table(t) => t[stage - 1].windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// Checks the schedule covers stages `1..=N`, states `0..=N`, and never
    /// quotes below `W0`.
    pub fn validate(&self, cfg: &GameConfig) -> Result<()> {
        let n = cfg.horizon;
        match self {
            PriceSchedule::Constant(p) => {
                if !p.is_finite() || *p < cfg.w0 {
                    return Err(Error::config(format!("price {p} is below W0 = {}", cfg.w0)));
                }
            }
            PriceSchedule::Table(t) => {
                if t.len() != n {
                    return Err(Error::config(format!(
                        "price table has {} stages, horizon is {n}",
                        t.len()
                    )));
                }
                for (k, row) in t.iter().enumerate() {
                    if row.len() != n + 1 {
                        return Err(Error::config(format!(
                            "price table stage {} has {} states, expected {}",
                            k + 1,
                            row.len(),
                            n + 1
                        )));
                    }
                    if let Some(s) = row.iter().position(|p| !p.is_finite() || *p < cfg.w0) {
                        return Err(Error::config(format!(
                            "price at stage {}, state {s} is {} (below W0 = {})",
                            k + 1,
                            row[s],
                            cfg.w0
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One-stage reward `r_k(s, γ)`: minus the weighted expected next trace and
/// channel cost. The cheap channel always costs `W0` regardless of `price`.
pub fn stage_reward(
    state: usize,
    premium: bool,
    price: f64,
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
) -> f64 {
    let (reset, advance) = kernel(premium, cfg);
    let expected_trace = reset * ladder.trace(0) + advance * ladder.trace(ladder.successor(state));
    let cost = if premium { price } else { cfg.w0 };
    -(cfg.zeta * expected_trace + (1.0 - cfg.zeta) * cost)
}

/// Optimal value function and policy of the follower's MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSolution {
    /// `values[k - 1][s] = V_k(s)` for `k = 1..=N+1`; the last row is zero.
    values: Vec<Vec<f64>>,
    /// `policy[k - 1][s]`: use the premium channel at stage `k`, state `s`.
    policy: Vec<Vec<bool>>,
    /// Smallest state index using the premium channel, per stage.
    thresholds: Vec<Option<usize>>,
}

impl ClientSolution {
    pub fn horizon(&self) -> usize {
        self.policy.len()
    }

    /// `V_k(s)` for `k` in `1..=N+1`.
    pub fn value(&self, stage: usize, state: usize) -> f64 {
        self.values[stage - 1][state]
    }

    pub fn action(&self, stage: usize, state: usize) -> bool {
        self.policy[stage - 1][state]
    }

    pub fn value_row(&self, stage: usize) -> &[f64] {
        &self.values[stage - 1]
    }

    pub fn policy_row(&self, stage: usize) -> &[bool] {
        &self.policy[stage - 1]
    }

    pub fn is_monotone(&self, stage: usize) -> bool {
        threshold_of_row(self.policy_row(stage), stage).is_ok()
    }

    /// `None` if the stage never uses the premium channel, or if the row is
    /// not monotone (possible only under state-dependent prices).
    pub fn threshold(&self, stage: usize) -> Option<usize> {
        self.thresholds[stage - 1]
    }

    pub fn thresholds(&self) -> &[Option<usize>] {
        &self.thresholds
    }

    /// Expected total reward from stage 1 at the steady-state start.
    pub fn optimal_value(&self) -> f64 {
        self.values[0][0]
    }
}

/// Backward induction on the optimality equation. Ties go to the premium
/// channel (the largest maximizer).
pub fn value_iteration(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
) -> Result<ClientSolution> {
    let n = cfg.horizon;
    if ladder.max_index() < n {
        return Err(Error::config(format!(
            "ladder has {} rungs, horizon {n} needs {}",
            ladder.traces().len(),
            n + 1
        )));
    }
    prices.validate(cfg)?;
    let states = n + 1;
    let mut values = vec![vec![0.0; states]; n + 1];
    let mut policy = vec![vec![false; states]; n];

    for k in (1..=n).rev() {
        let (done, todo) = values.split_at_mut(k);
        let next = &todo[0];
        let current = &mut done[k - 1];
        for s in 0..states {
            let price = prices.price(k, s);
            let q_value = |premium: bool| {
                let (reset, advance) = kernel(premium, cfg);
                stage_reward(s, premium, price, ladder, cfg)
                    + reset * next[0]
                    + advance * next[ladder.successor(s)]
            };
            let (stay, switch) = (q_value(false), q_value(true));
            let premium = switch >= stay;
            policy[k - 1][s] = premium;
            current[s] = if premium { switch } else { stay };
        }
    }

    // Monotonicity is guaranteed where the stage's price is flat in state;
    // elsewhere a non-monotone row simply has no threshold.
    let mut thresholds = Vec::with_capacity(n);
    for k in 1..=n {
        match threshold_of_row(&policy[k - 1], k) {
            Ok(t) => thresholds.push(t),
            Err(e) if prices.is_state_constant(k) => return Err(e),
            Err(_) => {
                log::debug!("stage {k}: state-dependent prices give a non-monotone policy row");
                thresholds.push(None);
            }
        }
    }

    Ok(ClientSolution {
        values,
        policy,
        thresholds,
    })
}

fn threshold_of_row(row: &[bool], stage: usize) -> Result<Option<usize>> {
    if let Some(s) = row.windows(2).position(|w| w[0] && !w[1]) {
        return Err(Error::Structural {
            property: "monotone policy",
            stage,
            state: s + 1,
            detail: "premium channel chosen at a better state but not at a worse one".into(),
        });
    }
    Ok(row.iter().position(|&a| a))
}

/// Smallest state index at which stage `k` uses the premium channel, after
/// checking the row is monotone.
pub fn extract_threshold(solution: &ClientSolution, stage: usize) -> Result<Option<usize>> {
    threshold_of_row(solution.policy_row(stage), stage)
}

/// Outcome of [`check_superadditivity`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuperadditivityReport {
    /// Number of (stage, adjacent pair) reward identities checked.
    pub reward_checks: usize,
    /// Number of (stage, adjacent pair) continuation inequalities checked.
    pub continuation_checks: usize,
    /// Stages whose price varies with state, where the reward identity does
    /// not apply.
    pub skipped_stages: Vec<usize>,
    /// Largest relative deviation seen in the reward identity.
    pub max_reward_rel_error: f64,
    /// Most negative continuation cross-difference seen.
    pub min_continuation_margin: f64,
}

pub const REWARD_IDENTITY_RTOL: f64 = 1e-12;
pub const CONTINUATION_SLACK: f64 = 1e-12;

/// Checks that the stage reward and continuation of the optimality equation
/// are each superadditive on state × action, at every stage and every pair of
/// adjacent states `(s⁻, s)`.
///
/// The reward cross-difference must equal `ζ(λ1 − λ2)(Tr{succ(s)} − Tr{s})`
/// (only when the stage's price is constant across states), and the
/// continuation cross-difference must equal `(λ2 − λ1)(V_{k+1}(succ s) −
/// V_{k+1}(s))` and be nonnegative.
pub fn check_superadditivity(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
    solution: &ClientSolution,
) -> Result<SuperadditivityReport> {
    let n = cfg.horizon;
    let gap = cfg.quality_gap();
    let mut report = SuperadditivityReport {
        min_continuation_margin: f64::INFINITY,
        ..Default::default()
    };

    for k in 1..=n {
        let constant_price = prices.is_state_constant(k);
        if !constant_price {
            report.skipped_stages.push(k);
        }
        let next = solution.value_row(k + 1);
        let continuation = |s: usize, premium: bool| {
            let (reset, advance) = kernel(premium, cfg);
            reset * next[0] + advance * next[ladder.successor(s)]
        };

        for s in 1..=n {
            let lo = s - 1;
            if constant_price {
                let price = prices.price(k, s);
                let r = |state, premium| stage_reward(state, premium, price, ladder, cfg);
                let terms = [r(s, true), r(lo, false), r(s, false), r(lo, true)];
                let cross = (terms[0] + terms[1]) - (terms[2] + terms[3]);
                let closed = cfg.zeta * gap * (ladder.trace(ladder.successor(s)) - ladder.trace(s));
                let rel = (cross - closed).abs() / closed.abs().max(1.0);
                report.reward_checks += 1;
                report.max_reward_rel_error = report.max_reward_rel_error.max(rel);
                if rel > REWARD_IDENTITY_RTOL {
                    return Err(Error::Structural {
                        property: "reward superadditivity identity",
                        stage: k,
                        state: s,
                        detail: format!("cross difference {cross} vs closed form {closed}"),
                    });
                }
            }

            let cross = (continuation(s, true) + continuation(lo, false))
                - (continuation(s, false) + continuation(lo, true));
            let closed = -gap * (next[ladder.successor(s)] - next[s]);
            let scale = next[0].abs().max(next[s].abs()).max(1.0);
            report.continuation_checks += 1;
            report.min_continuation_margin = report.min_continuation_margin.min(cross);
            if (cross - closed).abs() > REWARD_IDENTITY_RTOL * scale {
                return Err(Error::Structural {
                    property: "continuation cross-difference identity",
                    stage: k,
                    state: s,
                    detail: format!("cross difference {cross} vs closed form {closed}"),
                });
            }
            if cross < -CONTINUATION_SLACK {
                return Err(Error::Structural {
                    property: "continuation superadditivity",
                    stage: k,
                    state: s,
                    detail: format!("cross difference {cross} is negative"),
                });
            }
        }
    }
    Ok(report)
}

/// Checks every value row is nonincreasing in state.
pub fn check_value_monotonicity(solution: &ClientSolution) -> Result<()> {
    for k in 1..=solution.horizon() {
        let row = solution.value_row(k);
        for (s, w) in row.windows(2).enumerate() {
            if w[1] > w[0] + 1e-12 * (1.0 + w[0].abs()) {
                return Err(Error::Structural {
                    property: "value nonincreasing in state",
                    stage: k,
                    state: s + 1,
                    detail: format!("V({}) = {} < V({}) = {}", s, w[0], s + 1, w[1]),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn study1() -> GameConfig {
        GameConfig::new(0.99, 0.2, 5.0, 10.0, 100.0, 0.5, 20).unwrap()
    }

    fn walk_ladder(n: usize) -> CovarianceLadder {
        let p = 0.185_410_196_624_968_5;
        CovarianceLadder::from_traces((0..=n).map(|i| p + 0.3 * i as f64).collect()).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(GameConfig::new(0.2, 0.99, 5.0, 10.0, 100.0, 0.5, 20).is_err());
        assert!(GameConfig::new(0.5, 0.5, 5.0, 10.0, 100.0, 0.5, 20).is_err());
        assert!(GameConfig::new(1.0, 0.2, 5.0, 10.0, 100.0, 0.5, 20).is_err());
        assert!(GameConfig::new(0.9, 0.0, 5.0, 10.0, 100.0, 0.5, 20).is_err());
        assert!(GameConfig::new(0.9, 0.2, 5.0, 10.0, 10.0, 0.5, 20).is_err());
        assert!(GameConfig::new(0.9, 0.2, 10.0, 10.0, 100.0, 0.5, 20).is_err());
        assert!(GameConfig::new(0.9, 0.2, 5.0, 10.0, 100.0, 1.0, 20).is_err());
        assert!(GameConfig::new(0.9, 0.2, 5.0, 10.0, 100.0, 0.0, 20).is_err());
        assert!(GameConfig::new(0.9, 0.2, 5.0, 10.0, 100.0, 0.5, 0).is_err());
        let err = GameConfig::new(0.2, 0.99, 5.0, 10.0, 100.0, 0.5, 20).unwrap_err();
        assert!(err.to_string().contains("lambda1 must exceed lambda2"));
    }

    #[test]
    fn kernel_examples() {
        let cfg = study1();
        assert_eq!(kernel(true, &cfg), (0.99, 1.0 - 0.99));
        assert_eq!(kernel(false, &cfg), (0.2, 0.8));
        for a in [false, true] {
            let (p, q) = kernel(a, &cfg);
            assert_eq!(p + q, 1.0);
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = study1();
        let ladder = walk_ladder(20);
        let (t0, t1) = (ladder.trace(0), ladder.trace(1));
        let r = stage_reward(0, false, 10.0, &ladder, &cfg);
        assert!((r - -(0.5 * (0.2 * t0 + 0.8 * t1) + 2.5)).abs() < 1e-14);

        let r = stage_reward(0, true, 10.0, &ladder, &cfg);
        let expected =
            -(0.5 * (0.99 * 0.185_410_196_624_968_5 + 0.01 * 0.485_410_196_624_968_5) + 5.0);
        assert!((r - expected).abs() < 1e-12);

        for s in 0..=20 {
            assert!(
                stage_reward(s, true, cfg.w0, &ladder, &cfg)
                    >= stage_reward(s, false, cfg.w0, &ladder, &cfg)
            );
        }
    }

    #[test]
    fn floor_prices_mean_always_premium() {
        let cfg = study1();
        let sol =
            value_iteration(&walk_ladder(20), &cfg, &PriceSchedule::constant(cfg.w0)).unwrap();
        for k in 1..=20 {
            assert!(sol.policy_row(k).iter().all(|&a| a));
            assert_eq!(sol.threshold(k), Some(0));
        }
    }

    #[test]
    fn single_stage_matches_closed_form() {
        let ladder = walk_ladder(1);
        for &(zeta, price) in &[(0.5, 5.2), (0.5, 5.3), (0.9, 8.0), (0.1, 5.01)] {
            let cfg = GameConfig::new(0.99, 0.2, 5.0, 5.5, 9.0, zeta, 1).unwrap();
            let sol = value_iteration(&ladder, &cfg, &PriceSchedule::constant(price)).unwrap();
            for s in 0..=1 {
                let succ = ladder.successor(s);
                let accept = (1.0 - zeta) * (price - cfg.w0)
                    <= zeta * cfg.quality_gap() * (ladder.trace(succ) - ladder.trace(0));
                assert_eq!(sol.action(1, s), accept, "zeta {zeta} price {price} s {s}");
            }
        }
    }

    #[test]
    fn exact_tie_goes_to_premium() {
        // ζ = 0.5, gap 0.5, Δtrace 1 => indifference price W0 + 0.5
        let ladder = CovarianceLadder::from_traces(vec![1.0, 2.0]).unwrap();
        let cfg = GameConfig::new(0.75, 0.25, 5.0, 5.5, 9.0, 0.5, 1).unwrap();
        let sol = value_iteration(&ladder, &cfg, &PriceSchedule::constant(5.5)).unwrap();
        assert!(sol.action(1, 0));
        let sol = value_iteration(&ladder, &cfg, &PriceSchedule::constant(5.5 + 1e-9)).unwrap();
        assert!(!sol.action(1, 0));
    }

    #[test]
    fn thresholds() {
        let mk = |rows: Vec<Vec<bool>>| ClientSolution {
            values: vec![vec![0.0; rows[0].len()]; rows.len() + 1],
            thresholds: vec![None; rows.len()],
            policy: rows,
        };
        let f = false;
        let t = true;
        let sol = mk(vec![
            vec![f, f, t, t, t],
            vec![t, t, t, t, t],
            vec![f, f, f, f, f],
        ]);
        assert_eq!(extract_threshold(&sol, 1).unwrap(), Some(2));
        assert_eq!(extract_threshold(&sol, 2).unwrap(), Some(0));
        assert_eq!(extract_threshold(&sol, 3).unwrap(), None);
        let bad = mk(vec![vec![f, t, f]]);
        assert!(matches!(
            extract_threshold(&bad, 1),
            Err(Error::Structural {
                stage: 1,
                state: 2,
                ..
            })
        ));
    }

    #[test]
    fn horizon_longer_than_ladder_is_rejected() {
        let cfg = study1();
        assert!(value_iteration(&walk_ladder(5), &cfg, &PriceSchedule::constant(10.0)).is_err());
    }

    #[test]
    fn schedule_validation() {
        let cfg = GameConfig::new(0.9, 0.2, 5.0, 6.0, 7.0, 0.5, 2).unwrap();
        assert!(PriceSchedule::constant(4.0).validate(&cfg).is_err());
        assert!(PriceSchedule::Table(vec![vec![6.0; 3]])
            .validate(&cfg)
            .is_err());
        assert!(
            PriceSchedule::Table(vec![vec![6.0; 3], vec![6.0, 4.0, 6.0]])
                .validate(&cfg)
                .is_err()
        );
        let ok = PriceSchedule::Table(vec![vec![6.0; 3], vec![5.0, 6.0, 7.0]]);
        assert!(ok.validate(&cfg).is_ok());
        assert!(ok.is_state_constant(1));
        assert!(!ok.is_state_constant(2));
    }

    #[test]
    fn superadditivity_on_walk_ladder() {
        let cfg = GameConfig::new(0.9, 0.3, 5.0, 6.0, 7.0, 0.4, 8).unwrap();
        let ladder = walk_ladder(8);
        let prices = PriceSchedule::constant(6.0);
        let sol = value_iteration(&ladder, &cfg, &prices).unwrap();
        let report = check_superadditivity(&ladder, &cfg, &prices, &sol).unwrap();
        assert_eq!(report.reward_checks, 8 * 8);
        assert!(report.skipped_stages.is_empty());
        assert!(report.min_continuation_margin >= -CONTINUATION_SLACK);
        check_value_monotonicity(&sol).unwrap();
    }

    #[test]
    fn reward_identity_scales_with_quality_gap() {
        let ladder = walk_ladder(3);
        let identity = |l1: f64, l2: f64| {
            let cfg = GameConfig::new(l1, l2, 5.0, 6.0, 7.0, 0.5, 3).unwrap();
            let r = |s, a| stage_reward(s, a, 6.0, &ladder, &cfg);
            (r(2, true) + r(1, false)) - (r(2, false) + r(1, true))
        };
        let full = identity(0.9, 0.3);
        let half = identity(0.6, 0.3);
        assert!((full - 2.0 * half).abs() < 1e-12);
        assert!((full - 0.5 * 0.6 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn flat_ladder_gives_zero_identity() {
        let ladder = CovarianceLadder::from_traces(vec![1.0, 1.0, 1.0]).unwrap();
        let cfg = GameConfig::new(0.9, 0.3, 5.0, 6.0, 7.0, 0.5, 2).unwrap();
        let prices = PriceSchedule::constant(6.0);
        let sol = value_iteration(&ladder, &cfg, &prices).unwrap();
        let report = check_superadditivity(&ladder, &cfg, &prices, &sol).unwrap();
        assert_eq!(report.max_reward_rel_error, 0.0);
        // no quality benefit: never pay the premium
        assert!(sol.policy_row(1).iter().all(|&a| !a));
    }

    #[test]
    fn state_dependent_stage_is_skipped() {
        let cfg = GameConfig::new(0.9, 0.3, 5.0, 6.0, 7.0, 0.5, 2).unwrap();
        let ladder = walk_ladder(2);
        let prices = PriceSchedule::Table(vec![vec![6.0; 3], vec![5.0, 6.0, 7.0]]);
        let sol = value_iteration(&ladder, &cfg, &prices).unwrap();
        let report = check_superadditivity(&ladder, &cfg, &prices, &sol).unwrap();
        assert_eq!(report.skipped_stages, vec![2]);
        assert_eq!(report.reward_checks, 2);
        assert_eq!(report.continuation_checks, 4);
        // price jumps at the worst state push the client back to channel 2
        assert!(!sol.is_monotone(2));
        assert_eq!(sol.threshold(2), None);
    }
}

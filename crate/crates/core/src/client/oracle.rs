//! Exhaustive enumeration of deterministic Markov policies.
//!
//! Independent of the backward recursion: each candidate policy is scored by
//! pushing the state distribution forward stage by stage and summing the
//! objective `−Σ [ζ E[Tr P_k] + (1 − ζ) E[cost_k]]` directly.

use crate::client::{GameConfig, PriceSchedule};
use crate::error::{Error, Result};
use crate::estimation::CovarianceLadder;

/// Enumeration covers `2^(N(N+1)/2)` policies; 6 stages is about two million.
pub const MAX_ORACLE_HORIZON: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_value: f64,
    /// `best_policy[k - 1][s]`; states unreachable at stage `k` are `false`.
    pub best_policy: Vec<Vec<bool>>,
    pub policies_enumerated: u64,
}

/// Expected total reward of a Markov policy from state 0 at stage 1.
/// `policy[k - 1][s]` selects the premium channel.
pub fn evaluate_policy(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
    policy: &[Vec<bool>],
) -> f64 {
    evaluate(ladder, cfg, prices, |k, s| policy[k - 1][s])
}

fn evaluate(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
    premium: impl Fn(usize, usize) -> bool,
) -> f64 {
    let n = cfg.horizon;
    let traces = ladder.traces();
    let mut dist = vec![0.0; n + 1];
    dist[0] = 1.0;
    let mut total = 0.0;
    for k in 1..=n {
        let mut next = vec![0.0; n + 1];
        let mut expected_cost = 0.0;
        for s in 0..k {
            let p = dist[s];
            if p == 0.0 {
                continue;
            }
            let use_premium = premium(k, s);
            let delivered = if use_premium {
                cfg.lambda1
            } else {
                cfg.lambda2
            };
            next[0] += p * delivered;
            next[s + 1] += p * (1.0 - delivered);
            expected_cost += p * if use_premium {
                prices.price(k, s)
            } else {
                cfg.w0
            };
        }
        let expected_trace: f64 = next.iter().zip(traces).map(|(p, t)| p * t).sum();
        total -= cfg.zeta * expected_trace + (1.0 - cfg.zeta) * expected_cost;
        dist = next;
    }
    total
}

/// Maximizes the expected total reward over every deterministic Markov
/// policy on the reachable states (indices `0..k` at stage `k`).
pub fn brute_force_oracle(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    prices: &PriceSchedule,
) -> Result<OracleResult> {
    let n = cfg.horizon;
    if n > MAX_ORACLE_HORIZON {
        return Err(Error::config(format!(
            "brute-force oracle enumerates 2^(N(N+1)/2) policies; N = {n} exceeds the limit of {MAX_ORACLE_HORIZON}"
        )));
    }
    if ladder.max_index() < n {
        return Err(Error::config(format!(
            "ladder has {} rungs, horizon {n} needs {}",
            ladder.traces().len(),
            n + 1
        )));
    }
    prices.validate(cfg)?;

    // stage k owns bits offset(k) .. offset(k) + k
    let offset = |k: usize| (k - 1) * k / 2;
    let bits = n * (n + 1) / 2;
    let count: u64 = 1 << bits;

    let mut best_value = f64::NEG_INFINITY;
    let mut best_code = 0u64;
    for code in 0..count {
        let v = evaluate(ladder, cfg, prices, |k, s| {
            (code >> (offset(k) + s)) & 1 == 1
        });
        if v > best_value {
            best_value = v;
            best_code = code;
        }
    }

    let best_policy = (1..=n)
        .map(|k| {
            (0..=n)
                .map(|s| s < k && (best_code >> (offset(k) + s)) & 1 == 1)
                .collect()
        })
        .collect();

    Ok(OracleResult {
        best_value,
        best_policy,
        policies_enumerated: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_long_horizons() {
        let cfg = GameConfig::new(0.9, 0.2, 5.0, 6.0, 7.0, 0.5, 7).unwrap();
        let ladder = CovarianceLadder::from_traces((0..=7).map(|i| i as f64).collect()).unwrap();
        let err = brute_force_oracle(&ladder, &cfg, &PriceSchedule::constant(6.0)).unwrap_err();
        assert!(err.to_string().contains("exceeds the limit"));
    }

    #[test]
    fn single_stage_enumerates_two_policies() {
        let cfg = GameConfig::new(0.9, 0.2, 5.0, 6.0, 7.0, 0.5, 1).unwrap();
        let ladder = CovarianceLadder::from_traces(vec![1.0, 3.0]).unwrap();
        let res = brute_force_oracle(&ladder, &cfg, &PriceSchedule::constant(6.0)).unwrap();
        assert_eq!(res.policies_enumerated, 2);
        // premium: -(0.5(0.9 + 0.1*3) + 0.5*6) = -3.6; cheap: -(0.5(0.2 + 0.8*3) + 2.5) = -3.8
        assert!((res.best_value - -3.6).abs() < 1e-12);
        assert_eq!(res.best_policy, vec![vec![true, false]]);
    }

    #[test]
    fn evaluation_of_a_fixed_policy_by_hand() {
        // N = 2, always cheap channel, traces [1, 2, 4]
        let cfg = GameConfig::new(0.9, 0.5, 1.0, 2.0, 3.0, 0.5, 2).unwrap();
        let ladder = CovarianceLadder::from_traces(vec![1.0, 2.0, 4.0]).unwrap();
        let policy = vec![vec![false; 3]; 2];
        let v = evaluate_policy(&ladder, &cfg, &PriceSchedule::constant(2.0), &policy);
        // stage 1: E[Tr] = 0.5*1 + 0.5*2 = 1.5; stage 2: dist (0.5, 0.5, 0)
        // -> reset 0.5, to 1: 0.25, to 2: 0.25 -> E[Tr] = 0.5 + 0.5 + 1.0 = 2.0
        let expected = -(0.5 * 1.5 + 0.5) - (0.5 * 2.0 + 0.5);
        assert!((v - expected).abs() < 1e-15);
    }
}

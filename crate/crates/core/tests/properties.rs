use proptest::prelude::*;

use chanprice::client::oracle::{brute_force_oracle, evaluate_policy};
use chanprice::client::{value_iteration, GameConfig, PriceSchedule};
use chanprice::estimation::{solve_ladder, CovarianceLadder, SystemModel};
use chanprice::server::{solve_server, verify_leader_consistency};
use chanprice::sim::{simulate_full_state, SimConfig};

/// Ladder with strictly increasing traces built from positive increments.
fn ladder_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_n).prop_flat_map(|n| {
        (Just(n), 0.01f64..3.0, prop::collection::vec(0.0f64..4.0, n)).prop_map(
            |(n, base, steps)| {
                let mut t = vec![base];
                for d in steps {
                    let last = *t.last().unwrap();
                    t.push(last + d);
                }
                (n, t)
            },
        )
    })
}

fn game_strategy(n: usize) -> impl Strategy<Value = GameConfig> {
    (
        0.0f64..0.9,
        0.01f64..1.0,
        0.0f64..10.0,
        0.0f64..5.0,
        0.0f64..20.0,
        0.02f64..0.98,
    )
        .prop_map(move |(l2, span, w0, dl, dh, zeta)| {
            let l1 = (l2 + span * (0.999 - l2)).max(l2 + 1e-6);
            GameConfig::new(l1, l2, w0, w0 + dl, w0 + dl + dh, zeta, n).unwrap()
        })
}

fn game_and_ladder(max_n: usize) -> impl Strategy<Value = (GameConfig, CovarianceLadder)> {
    ladder_strategy(max_n).prop_flat_map(|(n, traces)| {
        (
            game_strategy(n),
            Just(CovarianceLadder::from_traces(traces).unwrap()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_iteration_matches_oracle((cfg, ladder) in game_and_ladder(4), price_pick in 0usize..3) {
        let price = [cfg.w0, cfg.wl, cfg.wh][price_pick];
        let prices = PriceSchedule::constant(price);
        let sol = value_iteration(&ladder, &cfg, &prices).unwrap();
        let oracle = brute_force_oracle(&ladder, &cfg, &prices).unwrap();
        prop_assert!((sol.value(1, 0) - oracle.best_value).abs() <= 1e-9 * (1.0 + oracle.best_value.abs()));
        let policy: Vec<Vec<bool>> = (1..=cfg.horizon).map(|k| sol.policy_row(k).to_vec()).collect();
        let achieved = evaluate_policy(&ladder, &cfg, &prices, &policy);
        prop_assert!((achieved - oracle.best_value).abs() <= 1e-9 * (1.0 + oracle.best_value.abs()));
    }

    #[test]
    fn oracle_handles_state_dependent_prices((cfg, ladder) in game_and_ladder(3), seed in any::<u64>()) {
        let n = cfg.horizon;
        let table: Vec<Vec<f64>> = (0..n)
            .map(|k| (0..=n).map(|s| if (seed >> ((k * 4 + s) % 64)) & 1 == 1 { cfg.wh } else { cfg.wl }).collect())
            .collect();
        let prices = PriceSchedule::Table(table);
        let sol = value_iteration(&ladder, &cfg, &prices).unwrap();
        let oracle = brute_force_oracle(&ladder, &cfg, &prices).unwrap();
        prop_assert!((sol.value(1, 0) - oracle.best_value).abs() <= 1e-9 * (1.0 + oracle.best_value.abs()));
    }

    #[test]
    fn raising_the_price_never_lowers_the_threshold((cfg, ladder) in game_and_ladder(12)) {
        let key = |t: Option<usize>| t.unwrap_or(usize::MAX);
        let prices = [cfg.w0, cfg.wl, cfg.wh];
        let sols: Vec<_> = prices
            .iter()
            .map(|&p| value_iteration(&ladder, &cfg, &PriceSchedule::constant(p)).unwrap())
            .collect();
        for k in 1..=cfg.horizon {
            for pair in sols.windows(2) {
                prop_assert!(key(pair[1].threshold(k)) >= key(pair[0].threshold(k)));
                prop_assert!(pair[1].value(k, 0) <= pair[0].value(k, 0) + 1e-12);
            }
        }
    }

    #[test]
    fn discrete_server_policy_is_followed((cfg, ladder) in game_and_ladder(12)) {
        let server = solve_server(&ladder, &cfg).unwrap();
        let report = verify_leader_consistency(&server, &ladder, &cfg).unwrap();
        prop_assert!(report.is_consistent(), "{:?}", report.discrepancies);
    }
}

#[test]
fn scalar_walk_estimation_error_matches_ladder() {
    let model = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
    let cfg = GameConfig::new(0.9, 0.3, 1.0, 1.2, 1.5, 0.5, 10).unwrap();
    let (_, ladder) = solve_ladder(&model, cfg.horizon).unwrap();
    let prices = PriceSchedule::constant(cfg.wl);
    let client = value_iteration(&ladder, &cfg, &prices).unwrap();
    let full = simulate_full_state(
        &model,
        &ladder,
        &cfg,
        &client,
        &prices,
        &SimConfig::new(20_000, 3),
    )
    .unwrap();
    for (k, (emp, pred)) in full
        .empirical_mse
        .iter()
        .zip(&full.predicted_mse)
        .enumerate()
    {
        let rel = (emp - pred).abs() / pred;
        assert!(
            rel <= 0.05,
            "stage {}: empirical {emp} vs predicted {pred}",
            k + 1
        );
    }
}

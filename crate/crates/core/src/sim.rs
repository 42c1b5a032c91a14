//! Monte Carlo simulation of the priced remote-estimation loop.
//!
//! Every run starts at ladder index 0 (remote covariance `P̄`). At each stage
//! the leader posts a price, the client plays its solved policy, and a single
//! uniform draw decides delivery. Randomness comes from ChaCha8 streams: run
//! `i` reads delivery draws from stream `i` of the master seed, so runs are
//! independent of execution order. The full-state simulator draws process and
//! measurement noise from a separate stream family and consumes the delivery
//! stream identically, so both simulators see the same drop pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::client::{kernel, value_iteration, ClientSolution, GameConfig, PriceSchedule};
use crate::error::{Error, Result};
use crate::estimation::{kalman_step, CovarianceLadder, KalmanState, SystemModel};
use crate::matrix::{self, Matrix};
use crate::server::{solve_server, ServerSolution};

/// Stream ids at or above this are used for process/measurement noise.
const NOISE_STREAM_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub record_traces: bool,
    /// Ladder index every run starts from.
    #[serde(default)]
    pub start_state: usize,
    /// Debug hook: every packet is delivered regardless of channel.
    #[serde(default)]
    pub force_delivery: bool,
}

impl SimConfig {
    pub fn new(runs: usize, seed: u64) -> Self {
        Self {
            runs,
            seed,
            record_traces: false,
            start_state: 0,
            force_delivery: false,
        }
    }

    pub fn validate(&self, cfg: &GameConfig) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("sim.runs must be at least 1"));
        }
        if self.start_state > cfg.horizon {
            return Err(Error::config(format!(
                "start state {} exceeds the largest ladder index {}",
                self.start_state, cfg.horizon
            )));
        }
        Ok(())
    }
}

/// Sample mean with standard error `sample_std / √n` (zero for one sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> Estimate {
        let std_error = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean: self.mean,
            std_error,
        }
    }
}

/// One stage of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    /// Ladder index before the stage's transmission.
    pub state: usize,
    pub price: f64,
    pub premium: bool,
    pub delivered: bool,
}

/// Empirical transition counts from each (state, action) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCounts {
    /// `trials[s][a]`, `a = 0` cheap, `a = 1` premium.
    pub trials: Vec<[u64; 2]>,
    pub resets: Vec<[u64; 2]>,
}

impl TransitionCounts {
    fn new(states: usize) -> Self {
        Self {
            trials: vec![[0; 2]; states],
            resets: vec![[0; 2]; states],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub runs: usize,
    /// Realized client objective per run, averaged.
    pub jc: Estimate,
    /// Realized server revenue per run, averaged.
    pub js: Estimate,
    /// `occupancy[k - 1][s]`: runs in state `s` at the start of stage `k`.
    pub occupancy: Vec<Vec<u64>>,
    pub transitions: TransitionCounts,
    pub traces: Option<Vec<Vec<StepRecord>>>,
}

/// Per-stage error statistics from [`simulate_full_state`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullStateResult {
    pub game: SimResult,
    /// `empirical_mse[k - 1]`: mean over runs of `‖x_k − x̂_k‖²`.
    pub empirical_mse: Vec<f64>,
    /// `predicted_mse[k - 1]`: mean over runs of `Tr{P_k}` from the ladder.
    pub predicted_mse: Vec<f64>,
}

fn check_inputs(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    client: &ClientSolution,
    prices: &PriceSchedule,
    sim: &SimConfig,
) -> Result<()> {
    cfg.validate()?;
    sim.validate(cfg)?;
    if client.horizon() != cfg.horizon {
        return Err(Error::config(format!(
            "client solution horizon {} does not match game horizon {}",
            client.horizon(),
            cfg.horizon
        )));
    }
    if ladder.max_index() < cfg.horizon {
        return Err(Error::config(format!(
            "ladder has {} rungs, horizon {} needs {}",
            ladder.traces().len(),
            cfg.horizon,
            cfg.horizon + 1
        )));
    }
    prices.validate(cfg)
}

fn delivery_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

fn noise_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM_BASE | run as u64);
    rng
}

/// Plays one run, calling `observe` after each stage with the record and the
/// ladder index after the transition. Returns `(J_C, J_S)` for the run.
fn play_run(
    run: usize,
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    client: &ClientSolution,
    prices: &PriceSchedule,
    sim: &SimConfig,
    mut observe: impl FnMut(&StepRecord, usize),
) -> (f64, f64) {
    let mut rng = delivery_rng(sim.seed, run);
    let mut state = sim.start_state;
    let (mut jc, mut js) = (0.0, 0.0);
    for k in 1..=cfg.horizon {
        let price = prices.price(k, state);
        let premium = client.action(k, state);
        let (p_reset, _) = kernel(premium, cfg);
        let u: f64 = rng.random();
        let delivered = sim.force_delivery || u < p_reset;
        let next = if delivered {
            0
        } else {
            debug_assert!(
                sim.start_state > 0 || state < ladder.max_index(),
                "drop from the top rung along a path starting at P̄"
            );
            ladder.successor(state)
        };
        let cost = if premium { price } else { cfg.w0 };
        jc -= cfg.zeta * ladder.trace(next) + (1.0 - cfg.zeta) * cost;
        js += cost;
        observe(
            &StepRecord {
                stage: k,
                state,
                price,
                premium,
                delivered,
            },
            next,
        );
        state = next;
    }
    (jc, js)
}

struct Tally {
    jc: Welford,
    js: Welford,
    occupancy: Vec<Vec<u64>>,
    transitions: TransitionCounts,
    traces: Option<Vec<Vec<StepRecord>>>,
}

impl Tally {
    fn new(cfg: &GameConfig, sim: &SimConfig) -> Self {
        let states = cfg.horizon + 1;
        Self {
            jc: Welford::default(),
            js: Welford::default(),
            occupancy: vec![vec![0; states]; cfg.horizon],
            transitions: TransitionCounts::new(states),
            traces: sim.record_traces.then(Vec::new),
        }
    }

    fn record_step(&mut self, step: &StepRecord, trace: &mut Option<Vec<StepRecord>>) {
        self.occupancy[step.stage - 1][step.state] += 1;
        let a = usize::from(step.premium);
        self.transitions.trials[step.state][a] += 1;
        if step.delivered {
            self.transitions.resets[step.state][a] += 1;
        }
        if let Some(t) = trace {
            t.push(*step);
        }
    }

    fn finish_run(&mut self, jc: f64, js: f64, trace: Option<Vec<StepRecord>>) {
        self.jc.push(jc);
        self.js.push(js);
        if let (Some(all), Some(t)) = (self.traces.as_mut(), trace) {
            all.push(t);
        }
    }

    fn into_result(self, runs: usize) -> SimResult {
        SimResult {
            runs,
            jc: self.jc.estimate(),
            js: self.js.estimate(),
            occupancy: self.occupancy,
            transitions: self.transitions,
            traces: self.traces,
        }
    }
}

/// Simulates the priced game on the covariance ladder only.
pub fn simulate(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    client: &ClientSolution,
    prices: &PriceSchedule,
    sim: &SimConfig,
) -> Result<SimResult> {
    check_inputs(ladder, cfg, client, prices, sim)?;
    let mut tally = Tally::new(cfg, sim);
    for run in 0..sim.runs {
        let mut trace = sim.record_traces.then(Vec::new);
        let (jc, js) = play_run(run, ladder, cfg, client, prices, sim, |step, _| {
            tally.record_step(step, &mut trace)
        });
        tally.finish_run(jc, js, trace);
    }
    Ok(tally.into_result(sim.runs))
}

fn sample_gaussian(rng: &mut ChaCha8Rng, chol: &Matrix) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..chol.cols())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(chol.mul(&Matrix::column(&z))?.as_slice().to_vec())
}

/// Simulates the same game while also propagating the plant, the sensor's
/// Kalman filter and the remote estimator, recording per-stage squared
/// estimation error against the ladder's prediction.
pub fn simulate_full_state(
    model: &SystemModel,
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    client: &ClientSolution,
    prices: &PriceSchedule,
    sim: &SimConfig,
) -> Result<FullStateResult> {
    check_inputs(ladder, cfg, client, prices, sim)?;
    if sim.start_state != 0 {
        return Err(Error::config(
            "full-state simulation starts at steady state; start_state must be 0",
        ));
    }
    if model.state_dim() != ladder.pbar().rows() {
        return Err(Error::config("ladder was not built for this model"));
    }
    let tol = 1e-9;
    let chol_q = matrix::cholesky_psd(model.q(), tol)?;
    let chol_r = matrix::cholesky_psd(model.r(), tol)?;
    let chol_pbar = matrix::cholesky_psd(ladder.pbar(), tol)?;
    let a = model.a();
    let c = model.c();
    let n = cfg.horizon;

    let mut tally = Tally::new(cfg, sim);
    let mut sq_err = vec![0.0; n];
    let mut predicted = vec![0.0; n];
    for run in 0..sim.runs {
        let mut noise = noise_rng(sim.seed, run);
        // sensor estimate starts at zero with error covariance P̄
        let mut x = sample_gaussian(&mut noise, &chol_pbar)?;
        let mut sensor = KalmanState::new(vec![0.0; model.state_dim()], ladder.pbar().clone());
        let mut remote = sensor.xhat.clone();
        let mut failure: Option<Error> = None;

        let mut trace = sim.record_traces.then(Vec::new);
        let (jc, js) = play_run(run, ladder, cfg, client, prices, sim, |step, next| {
            tally.record_step(step, &mut trace);
            if failure.is_some() {
                return;
            }
            let physics = (|| -> Result<()> {
                let w = sample_gaussian(&mut noise, &chol_q)?;
                let v = sample_gaussian(&mut noise, &chol_r)?;
                let ax = a.mul(&Matrix::column(&x))?;
                x = ax.as_slice().iter().zip(&w).map(|(p, q)| p + q).collect();
                let cx = c.mul(&Matrix::column(&x))?;
                let y: Vec<f64> = cx.as_slice().iter().zip(&v).map(|(p, q)| p + q).collect();
                sensor = kalman_step(model, &sensor, &y)?;
                remote = if step.delivered {
                    sensor.xhat.clone()
                } else {
                    a.mul(&Matrix::column(&remote))?.as_slice().to_vec()
                };
                let err: f64 = x.iter().zip(&remote).map(|(p, q)| (p - q).powi(2)).sum();
                sq_err[step.stage - 1] += err;
                predicted[step.stage - 1] += ladder.trace(next);
                Ok(())
            })();
            if let Err(e) = physics {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        tally.finish_run(jc, js, trace);
    }
    let runs = sim.runs as f64;
    Ok(FullStateResult {
        game: tally.into_result(sim.runs),
        empirical_mse: sq_err.into_iter().map(|s| s / runs).collect(),
        predicted_mse: predicted.into_iter().map(|s| s / runs).collect(),
    })
}

/// Leader thresholds, discrete prices, follower best response, simulation.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub server: ServerSolution,
    pub client: ClientSolution,
    pub prices: PriceSchedule,
    pub result: SimResult,
}

pub fn play_equilibrium(
    ladder: &CovarianceLadder,
    cfg: &GameConfig,
    sim: &SimConfig,
) -> Result<Equilibrium> {
    let server = solve_server(ladder, cfg)?;
    let prices = server.discrete_schedule(cfg)?;
    let client = value_iteration(ladder, cfg, &prices)?;
    let result = simulate(ladder, cfg, &client, &prices, sim)?;
    Ok(Equilibrium {
        server,
        client,
        prices,
        result,
    })
}

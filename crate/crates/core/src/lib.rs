//! Channel pricing and selection for remote state estimation, posed as a
//! finite-horizon Stackelberg game.
//!
//! A smart sensor (the client) runs a local Kalman filter and ships its
//! estimate to a remote estimator over one of two lossy channels. The
//! premium channel is owned by a server that posts a price each stage; the
//! client best-responds by choosing a channel. The remote estimator's error
//! covariance walks a ladder `P̄, h(P̄), h²(P̄), …` indexed by the number of
//! consecutive drops, which is the state of both players' decision problems.
//!
//! Modules, bottom-up:
//! - [`matrix`]: small dense matrix kernel.
//! - [`estimation`]: Lyapunov/Riccati operators, steady state, covariance ladder.
//! - [`client`]: the follower's MDP, value iteration, enumeration oracle.
//! - [`server`]: the leader's price thresholds and discrete pricing rule.
//! - [`sim`]: Monte Carlo closed-loop simulation and the equilibrium driver.
//! - [`cli`]: config loading and CSV/JSON artifact emission.

pub mod cli;
pub mod client;
pub mod error;
pub mod estimation;
pub mod matrix;
pub mod server;
pub mod sim;

pub use client::{ClientSolution, GameConfig, PriceSchedule};
pub use error::{Error, Result};
pub use estimation::{CovarianceLadder, KalmanState, SystemModel};
pub use matrix::Matrix;
pub use server::{PriceLabel, PricingMode, ServerSolution};
pub use sim::{SimConfig, SimResult};

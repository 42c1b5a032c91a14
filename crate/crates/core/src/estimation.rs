//! Sensor-side Kalman filtering and the remote estimator's covariance ladder.
//!
//! With the sensor at steady state the remote error covariance only ever
//! takes values `P̄, h(P̄), h²(P̄), …`: a successful delivery resets it to `P̄`,
//! a drop applies the open-loop update `h` once more. The ladder of traces of
//! those matrices is the state space of the pricing game.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};

/// Tolerance used for the PSD / PD checks on model covariances.
const COV_TOL: f64 = 1e-9;

pub const DEFAULT_STEADY_TOL: f64 = 1e-12;
pub const DEFAULT_STEADY_MAX_ITER: usize = 100_000;

/// How the `(A, C)` pair satisfies the observability requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observability {
    Observable,
    /// Not observable, but every unobservable mode is strictly stable.
    Detectable {
        rank: usize,
    },
}

/// Linear time-invariant process `x⁺ = Ax + w`, sensor `y = Cx + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: Matrix,
    c: Matrix,
    q: Matrix,
    r: Matrix,
    pi0: Matrix,
    observability: Observability,
}

impl SystemModel {
    /// Validates and builds a model. `pi0` defaults to `Q`.
    ///
    /// Rejects non-PSD `Q`/`Pi0`, non-PD `R`, and pairs `(A, C)` that are not
    /// even detectable. An undetectable-but-observable pair cannot happen; an
    /// unobservable but detectable pair is accepted with a logged warning.
    pub fn new(a: Matrix, c: Matrix, q: Matrix, r: Matrix, pi0: Option<Matrix>) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(Error::config(format!(
                "A must be square, got {}x{}",
                n,
                a.cols()
            )));
        }
        if c.cols() != n {
            return Err(Error::config(format!(
                "C must have {n} columns to match A, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        let m = c.rows();
        if q.rows() != n || q.cols() != n {
            return Err(Error::config(format!(
                "Q must be {n}x{n}, got {}x{}",
                q.rows(),
                q.cols()
            )));
        }
        if r.rows() != m || r.cols() != m {
            return Err(Error::config(format!(
                "R must be {m}x{m}, got {}x{}",
                r.rows(),
                r.cols()
            )));
        }
        let pi0 = pi0.unwrap_or_else(|| q.clone());
        if pi0.rows() != n || pi0.cols() != n {
            return Err(Error::config(format!(
                "Pi0 must be {n}x{n}, got {}x{}",
                pi0.rows(),
                pi0.cols()
            )));
        }
        if !matrix::is_psd(&q, COV_TOL)? {
            return Err(Error::config("Q must be positive semi-definite"));
        }
        if !matrix::is_positive_definite(&r, COV_TOL)? {
            return Err(Error::config("R must be positive definite"));
        }
        if !matrix::is_psd(&pi0, COV_TOL)? {
            return Err(Error::config("Pi0 must be positive semi-definite"));
        }

        let rank = matrix::observability_rank(&a, &c)?;
        let observability = if rank == n {
            Observability::Observable
        } else if matrix::is_detectable(&a, &c)? {
            log::debug!("(A, C) is not observable (rank {rank} < {n}) but detectable");
            Observability::Detectable { rank }
        } else {
            return Err(Error::config(format!(
                "(A, C) is neither observable (rank {rank} < {n}) nor detectable"
            )));
        };

        Ok(Self {
            q: q.symmetrize(),
            r: r.symmetrize(),
            pi0: pi0.symmetrize(),
            a,
            c,
            observability,
        })
    }

    /// Scalar system `x⁺ = a x + w`, `y = c x + v` with `Pi0 = q`.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64) -> Result<Self> {
        Self::new(
            Matrix::scalar(a),
            Matrix::scalar(c),
            Matrix::scalar(q),
            Matrix::scalar(r),
            None,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn pi0(&self) -> &Matrix {
        &self.pi0
    }

    pub fn observability(&self) -> Observability {
        self.observability
    }

    fn check_square_state(&self, x: &Matrix, op: &str) -> Result<()> {
        let n = self.state_dim();
        if x.rows() != n || x.cols() != n {
            return Err(Error::config(format!(
                "{op}: expected {n}x{n} matrix, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }
}

/// Open-loop covariance update `h(X) = A X Aᵀ + Q`.
pub fn lyapunov_h(model: &SystemModel, x: &Matrix) -> Result<Matrix> {
    model.check_square_state(x, "lyapunov_h")?;
    let axat = model.a.mul(x)?.mul(&model.a.transpose())?;
    Ok((&axat + &model.q).symmetrize())
}

/// Measurement-update map `g̃(X) = X − X Cᵀ (C X Cᵀ + R)⁻¹ C X`.
pub fn riccati_g(model: &SystemModel, x: &Matrix) -> Result<Matrix> {
    model.check_square_state(x, "riccati_g")?;
    let ct = model.c.transpose();
    let xct = x.mul(&ct)?;
    let innovation = &model.c.mul(&xct)? + &model.r;
    let correction = xct
        .mul(&matrix::mat_inv(&innovation)?)?
        .mul(&model.c)?
        .mul(x)?;
    Ok((x - &correction).symmetrize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub pbar: Matrix,
    /// `max |g̃(h(P̄)) − P̄|` at termination.
    pub residual: f64,
    pub iterations: usize,
}

/// Iterates `X ← g̃(h(X))` from `Pi0` and returns the first iterate whose
/// fixed-point residual `max|g̃(h(X)) − X|` is at most `tol`.
pub fn steady_state(model: &SystemModel, tol: f64, max_iter: usize) -> Result<SteadyState> {
    steady_state_from(model, model.pi0(), tol, max_iter)
}

/// As [`steady_state`] but from an explicit starting covariance.
pub fn steady_state_from(
    model: &SystemModel,
    start: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<SteadyState> {
    if !(tol > 0.0) {
        return Err(Error::config(format!(
            "steady_state tolerance must be positive, got {tol}"
        )));
    }
    model.check_square_state(start, "steady_state")?;
    let mut x = start.clone();
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = riccati_g(model, &lyapunov_h(model, &x)?)?;
        residual = (&next - &x).max_abs();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(SteadyState {
                pbar: x,
                residual,
                iterations: it,
            });
        }
        x = next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

/// The ordered set of remote covariances `h^i(P̄)` for `i = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceLadder {
    pbar: Matrix,
    traces: Vec<f64>,
    matrices: Vec<Matrix>,
}

impl CovarianceLadder {
    /// Builds a ladder directly from trace values, without an underlying
    /// model. Used for synthetic tests; traces must be nondecreasing.
    pub fn from_traces(traces: Vec<f64>) -> Result<Self> {
        if traces.len() < 2 {
            return Err(Error::config("ladder needs at least two rungs"));
        }
        if let Some(i) = traces.iter().position(|t| !t.is_finite()) {
            return Err(Error::config(format!("ladder trace {i} is not finite")));
        }
        check_monotone(&traces)?;
        let matrices = traces.iter().map(|&t| Matrix::scalar(t)).collect();
        Ok(Self {
            pbar: Matrix::scalar(traces[0]),
            traces,
            matrices,
        })
    }

    pub fn pbar(&self) -> &Matrix {
        &self.pbar
    }

    /// `traces[i] = Tr{h^i(P̄)}`.
    pub fn traces(&self) -> &[f64] {
        &self.traces
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn trace(&self, index: usize) -> f64 {
        self.traces[index]
    }

    /// Largest state index, `N`.
    pub fn max_index(&self) -> usize {
        self.traces.len() - 1
    }

    /// State index after a drop, clamped at `N`.
    pub fn successor(&self, index: usize) -> usize {
        (index + 1).min(self.max_index())
    }
}

fn check_monotone(traces: &[f64]) -> Result<()> {
    for (i, w) in traces.windows(2).enumerate() {
        if w[1] < w[0] - 1e-12 * (1.0 + w[0].abs()) {
            return Err(Error::Consistency(format!(
                "ladder traces decrease between rungs {i} and {}: {} > {}",
                i + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// `matrices[0] = P̄`, `matrices[i] = h(matrices[i-1])` up to index `N`.
pub fn build_ladder(
    model: &SystemModel,
    pbar: &Matrix,
    horizon: usize,
) -> Result<CovarianceLadder> {
    if horizon == 0 {
        return Err(Error::config("ladder horizon N must be at least 1"));
    }
    model.check_square_state(pbar, "build_ladder")?;
    let mut matrices = Vec::with_capacity(horizon + 1);
    matrices.push(pbar.clone());
    for i in 1..=horizon {
        let next = lyapunov_h(model, &matrices[i - 1])?;
        matrices.push(next);
    }
    let traces = matrices
        .iter()
        .map(matrix::trace)
        .collect::<Result<Vec<_>>>()?;
    check_monotone(&traces)?;
    Ok(CovarianceLadder {
        pbar: pbar.clone(),
        traces,
        matrices,
    })
}

/// Convenience: steady state with default tolerances, then the ladder.
pub fn solve_ladder(
    model: &SystemModel,
    horizon: usize,
) -> Result<(SteadyState, CovarianceLadder)> {
    let steady = steady_state(model, DEFAULT_STEADY_TOL, DEFAULT_STEADY_MAX_ITER)?;
    let ladder = build_ladder(model, &steady.pbar, horizon)?;
    Ok((steady, ladder))
}

/// Sensor-side filter state: estimate `x̂ˢ_{k|k}` and covariance `Pˢ_{k|k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub xhat: Vec<f64>,
    pub p: Matrix,
}

impl KalmanState {
    pub fn new(xhat: Vec<f64>, p: Matrix) -> Self {
        Self { xhat, p }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanUpdate {
    pub state: KalmanState,
    pub gain: Matrix,
}

/// One predict + update cycle of the sensor's Kalman filter.
pub fn kalman_step(model: &SystemModel, state: &KalmanState, y: &[f64]) -> Result<KalmanState> {
    kalman_step_with_gain(model, state, y).map(|u| u.state)
}

pub fn kalman_step_with_gain(
    model: &SystemModel,
    state: &KalmanState,
    y: &[f64],
) -> Result<KalmanUpdate> {
    let n = model.state_dim();
    if state.xhat.len() != n {
        return Err(Error::config(format!(
            "kalman_step: estimate has length {}, expected {n}",
            state.xhat.len()
        )));
    }
    if y.len() != model.output_dim() {
        return Err(Error::config(format!(
            "kalman_step: measurement has length {}, expected {}",
            y.len(),
            model.output_dim()
        )));
    }
    let x_pred = model.a.mul(&Matrix::column(&state.xhat))?;
    let p_pred = lyapunov_h(model, &state.p)?;

    let ct = model.c.transpose();
    let pct = p_pred.mul(&ct)?;
    let innovation_cov = &model.c.mul(&pct)? + &model.r;
    let gain = pct.mul(&matrix::mat_inv(&innovation_cov)?)?;

    let innovation = &Matrix::column(y) - &model.c.mul(&x_pred)?;
    let x_post = &x_pred + &gain.mul(&innovation)?;
    let p_post = (&p_pred - &gain.mul(&model.c)?.mul(&p_pred)?).symmetrize();

    Ok(KalmanUpdate {
        state: KalmanState {
            xhat: x_post.as_slice().to_vec(),
            p: p_post,
        },
        gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Positive root of P² + qP − qr = 0 for a = c = 1, the steady-state
    /// fixed point of the scalar random walk.
    fn scalar_walk_pbar(q: f64, r: f64) -> f64 {
        (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0
    }

    fn study_model() -> SystemModel {
        SystemModel::new(
            Matrix::diag(&[1.2, 0.9]),
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            Matrix::diag(&[0.3, 0.3]),
            Matrix::scalar(0.3),
            None,
        )
        .unwrap()
    }

    #[test]
    fn model_validation() {
        let bad_r = SystemModel::scalar(1.0, 1.0, 0.3, 0.0);
        assert!(matches!(bad_r, Err(Error::Config(_))));
        let bad_q = SystemModel::scalar(1.0, 1.0, -0.1, 0.3);
        assert!(matches!(bad_q, Err(Error::Config(_))));
        // unobservable unstable mode
        let undetectable = SystemModel::new(
            Matrix::diag(&[0.5, 1.1]),
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            Matrix::identity(2),
            Matrix::scalar(1.0),
            None,
        );
        assert!(matches!(undetectable, Err(Error::Config(_))));
        assert_eq!(
            study_model().observability(),
            Observability::Detectable { rank: 1 }
        );
        assert_eq!(
            SystemModel::scalar(1.0, 1.0, 0.3, 0.3)
                .unwrap()
                .observability(),
            Observability::Observable
        );
    }

    #[test]
    fn lyapunov_examples() {
        let zero_a = SystemModel::new(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::diag(&[0.3, 0.7]),
            Matrix::identity(2),
            None,
        );
        // A = 0 is unobservable through nothing: C = I keeps it observable
        let zero_a = zero_a.unwrap();
        let x = Matrix::from_rows(&[[5.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(lyapunov_h(&zero_a, &x).unwrap(), Matrix::diag(&[0.3, 0.7]));

        let ident = SystemModel::new(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            None,
        )
        .unwrap();
        assert_eq!(lyapunov_h(&ident, &x).unwrap(), x);

        let walk = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        let h = lyapunov_h(&walk, &Matrix::scalar(0.1854)).unwrap();
        assert!((h[(0, 0)] - 0.4854).abs() < 1e-15);
        assert!(lyapunov_h(&walk, &Matrix::identity(2)).is_err());
    }

    #[test]
    fn riccati_examples() {
        let blind = SystemModel::new(
            Matrix::scalar(0.5),
            Matrix::scalar(0.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            None,
        )
        .unwrap();
        assert_eq!(
            riccati_g(&blind, &Matrix::scalar(0.7)).unwrap(),
            Matrix::scalar(0.7)
        );

        let m = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        let g = riccati_g(&m, &Matrix::scalar(0.3)).unwrap();
        assert!((g[(0, 0)] - 0.15).abs() < 1e-15);
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0).unwrap();
        let g = riccati_g(&m, &Matrix::scalar(1.0)).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn steady_state_examples() {
        let m = SystemModel::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let s = steady_state(&m, 1e-12, 1000).unwrap();
        assert!((s.pbar[(0, 0)] - 0.5).abs() < 1e-15);

        let m = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        let s = steady_state(&m, 1e-12, 100_000).unwrap();
        let exact = scalar_walk_pbar(0.3, 0.3);
        assert!((exact - 0.185_410_196_624_968_5).abs() < 1e-15);
        assert!((s.pbar[(0, 0)] - exact).abs() < 1e-11);

        let s = steady_state(&study_model(), 1e-12, 100_000).unwrap();
        assert!(s.residual <= 1e-10);
        // oracle: the decoupled unobserved mode solves p = 0.81 p + 0.3
        assert!((s.pbar[(1, 1)] - 0.3 / (1.0 - 0.81)).abs() < 1e-10);
        assert!(s.pbar[(0, 1)].abs() < 1e-12);
        // doubling the iteration budget with a tighter stop does not move P̄
        let tighter = steady_state(&study_model(), 1e-14, 200_000).unwrap();
        assert!((&tighter.pbar - &s.pbar).max_abs() < 1e-10);
        assert!(matrix::is_psd(&s.pbar, 1e-12).unwrap());
    }

    #[test]
    fn steady_state_reports_non_convergence() {
        let m = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        match steady_state(&m, 1e-12, 2) {
            Err(Error::Convergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
        assert!(steady_state(&m, 0.0, 10).is_err());
    }

    #[test]
    fn steady_state_is_initialization_independent() {
        let model = study_model();
        let tol = 1e-12;
        let from_q = steady_state(&model, tol, 100_000).unwrap();
        let from_big =
            steady_state_from(&model, &Matrix::identity(2).scale(10.0), tol, 100_000).unwrap();
        assert!((&from_q.pbar - &from_big.pbar).max_abs() <= 10.0 * tol);
    }

    #[test]
    fn ladder_examples() {
        let m = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        let (steady, _) = solve_ladder(&m, 1).unwrap();
        assert!(build_ladder(&m, &steady.pbar, 0).is_err());
        let one = build_ladder(&m, &steady.pbar, 1).unwrap();
        assert_eq!(one.traces().len(), 2);

        let ladder = build_ladder(&m, &steady.pbar, 2).unwrap();
        let p = scalar_walk_pbar(0.3, 0.3);
        for (i, expected) in [p, p + 0.3, p + 0.6].into_iter().enumerate() {
            assert!((ladder.trace(i) - expected).abs() < 1e-10);
        }
        assert_eq!(ladder.successor(2), 2);
        assert_eq!(ladder.successor(0), 1);

        let (_, study) = solve_ladder(&study_model(), 20).unwrap();
        let min = study.traces().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, study.trace(0));
    }

    #[test]
    fn ladder_from_traces_rejects_decrease() {
        assert!(CovarianceLadder::from_traces(vec![1.0, 0.5]).is_err());
        assert!(CovarianceLadder::from_traces(vec![1.0]).is_err());
        assert!(CovarianceLadder::from_traces(vec![1.0, 1.0, 2.0]).is_ok());
    }

    #[test]
    fn kalman_gain_vanishes_for_uninformative_measurements() {
        let m = SystemModel::scalar(1.0, 1.0, 0.0, 1e12).unwrap();
        let s = KalmanState::new(vec![2.0], Matrix::scalar(1.0));
        let next = kalman_step(&m, &s, &[100.0]).unwrap();
        assert!((next.xhat[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn kalman_step_at_steady_state() {
        let m = SystemModel::scalar(1.0, 1.0, 0.3, 0.3).unwrap();
        let (steady, _) = solve_ladder(&m, 1).unwrap();
        let s = KalmanState::new(vec![0.0], steady.pbar.clone());
        let upd = kalman_step_with_gain(&m, &s, &[0.4]).unwrap();
        let hp = scalar_walk_pbar(0.3, 0.3) + 0.3;
        assert!((upd.gain[(0, 0)] - hp / (hp + 0.3)).abs() < 1e-10);
        assert!((upd.gain[(0, 0)] - 0.618_034).abs() < 1e-6);
        assert!((&upd.state.p - &steady.pbar).max_abs() < 1e-8);

        let model = study_model();
        let (steady, _) = solve_ladder(&model, 1).unwrap();
        let mut state = KalmanState::new(vec![0.0, 0.0], steady.pbar.clone());
        for k in 0..50 {
            state = kalman_step(&model, &state, &[0.1 * k as f64]).unwrap();
            assert!((&state.p - &steady.pbar).max_abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ladder_is_monotone_for_valid_models(
            a in prop::collection::vec(-1.5f64..1.5, 4),
            c in prop::collection::vec(-1.0f64..1.0, 2),
            q in 0.01f64..2.0,
            r in 0.05f64..2.0,
            horizon in 1usize..12,
        ) {
            let a = Matrix::new(2, 2, a).unwrap();
            let c = Matrix::new(1, 2, c).unwrap();
            let model = SystemModel::new(a, c, Matrix::identity(2).scale(q), Matrix::scalar(r), None);
            prop_assume!(model.is_ok());
            let model = model.unwrap();
            let steady = steady_state(&model, 1e-10, 200_000);
            prop_assume!(steady.is_ok());
            let steady = steady.unwrap();
            prop_assert!(steady.residual <= 1e-10);
            prop_assert!(matrix::is_psd(&steady.pbar, 1e-9).unwrap());
            let ladder = build_ladder(&model, &steady.pbar, horizon).unwrap();
            for w in ladder.traces().windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
            }
        }
    }
}

//! Minimal dense real-matrix kernel.
//!
//! Everything in this crate works with matrices of at most a handful of rows,
//! so the routines here favour clarity over blocking or SIMD. Storage is
//! row-major.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots below `SINGULAR_RTOL * max_row_norm` are treated as singular.
const SINGULAR_RTOL: f64 = 1e-12;
/// Relative tolerance for numerical rank.
const RANK_RTOL: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries. Fails on zero dimensions, a
    /// length mismatch, or any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some(bad) = rows.iter().position(|r| r.as_ref().len() != m) {
            return Err(Error::config(format!(
                "ragged matrix: row {bad} has {} entries, expected {m}",
                rows[bad].as_ref().len()
            )));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(n, m, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// A 1x1 matrix.
    pub fn scalar(v: f64) -> Self {
        Self::diag(&[v])
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        assert!(!v.is_empty(), "empty column vector");
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(A + Aᵀ) / 2`. Panics if not square.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Largest absolute row sum.
    fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::config(format!(
                "{op}: shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        mat_mul(self, other)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        self.try_add(rhs).expect("matrix add: shape mismatch")
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        self.try_sub(rhs).expect("matrix sub: shape mismatch")
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{}", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "mat_mul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out[(i, j)] += aik * b[(k, j)];
            }
        }
    }
    Ok(out)
}

/// Gauss-Jordan inversion with partial pivoting.
pub fn mat_inv(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::config(format!(
            "mat_inv: matrix is {}x{}, not square",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let tolerance = SINGULAR_RTOL * a.max_row_norm();
    let mut work = a.clone();
    let mut inv = Matrix::identity(n);

    for col in 0..n {
        let (pivot_row, pivot_abs) =
            (col..n)
                .map(|r| (r, work[(r, col)].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pivot_abs <= tolerance || pivot_abs == 0.0 {
            return Err(Error::Singular {
                pivot: pivot_abs,
                tolerance,
            });
        }
        if pivot_row != col {
            swap_rows(&mut work, col, pivot_row);
            swap_rows(&mut inv, col, pivot_row);
        }
        let p = work[(col, col)];
        for j in 0..n {
            work[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[(r, j)] -= factor * work[(col, j)];
                inv[(r, j)] -= factor * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    for j in 0..m.cols {
        m.data.swap(a * m.cols + j, b * m.cols + j);
    }
}

pub fn trace(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::config(format!(
            "trace: matrix is {}x{}, not square",
            a.rows, a.cols
        )));
    }
    Ok((0..a.rows).map(|i| a[(i, i)]).sum())
}

fn check_symmetric(a: &Matrix, tol: f64, op: &str) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::config(format!(
            "{op}: matrix is {}x{}, not square",
            a.rows, a.cols
        )));
    }
    let asym = a.max_asymmetry();
    if asym > tol * (1.0 + a.max_abs()) {
        return Err(Error::config(format!(
            "{op}: matrix asymmetric by {asym:e} (tolerance {tol:e})"
        )));
    }
    Ok(a.symmetrize())
}

/// Pivots of a diagonally pivoted LDLᵀ elimination of a symmetric matrix,
/// largest remaining diagonal first. Stops once the remaining diagonal is
/// at most `stop`; the second value is the largest remaining off-diagonal
/// magnitude at that point (zero if elimination ran to completion).
fn pivoted_ldl_pivots(sym: &Matrix, stop: f64) -> (Vec<f64>, f64) {
    let n = sym.rows;
    let mut work = sym.clone();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut pivots = Vec::with_capacity(n);

    while !remaining.is_empty() {
        let (pos, &p) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| work[(*x.1, *x.1)].total_cmp(&work[(*y.1, *y.1)]))
            .expect("non-empty");
        let d = work[(p, p)];
        if d <= stop {
            pivots.push(d);
            let off = remaining
                .iter()
                .flat_map(|&i| remaining.iter().map(move |&j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| work[(i, j)].abs())
                .fold(0.0, f64::max);
            return (pivots, off);
        }
        pivots.push(d);
        remaining.remove(pos);
        for &i in &remaining {
            let lij = work[(i, p)] / d;
            for &j in &remaining {
                work[(i, j)] -= lij * work[(p, j)];
            }
        }
    }
    (pivots, 0.0)
}

/// Positive semi-definiteness test.
///
/// The matrix must be symmetric to within `tol * (1 + max|a|)`; it is then
/// symmetrized and factored with diagonal pivoting. Returns true iff every
/// pivot is at least `-tol` and, once the pivots are exhausted, the residual
/// off-diagonal block vanishes to within `tol`.
pub fn is_psd(a: &Matrix, tol: f64) -> Result<bool> {
    let sym = check_symmetric(a, tol, "is_psd")?;
    let (pivots, residual_off) = pivoted_ldl_pivots(&sym, tol);
    let last = *pivots.last().expect("square matrix has pivots");
    if last < -tol {
        return Ok(false);
    }
    Ok(residual_off <= tol)
}

/// Strict positive definiteness: every pivot is positive and exceeds
/// `tol * max|a|`.
pub fn is_positive_definite(a: &Matrix, tol: f64) -> Result<bool> {
    let sym = check_symmetric(a, tol, "is_positive_definite")?;
    let floor = tol * sym.max_abs();
    let (pivots, _) = pivoted_ldl_pivots(&sym, floor);
    Ok(pivots.len() == sym.rows && pivots.iter().all(|&p| p > floor && p > 0.0))
}

/// Lower-triangular factor `L` with `L Lᵀ ≈ a` for a PSD matrix. Columns
/// whose pivot falls below `tol` are zeroed, so singular covariances (for
/// example `Q = 0`) are accepted.
pub fn cholesky_psd(a: &Matrix, tol: f64) -> Result<Matrix> {
    let sym = check_symmetric(a, tol, "cholesky_psd")?;
    let n = sym.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = sym[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol * (1.0 + sym.max_abs()) {
            if d < -tol * (1.0 + sym.max_abs()) {
                return Err(Error::config(format!(
                    "cholesky_psd: negative pivot {d:e} at column {j}"
                )));
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = sym[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Numerical rank by Gaussian elimination with full pivoting. Pivots below
/// `1e-10` times the first (largest) pivot count as zero.
pub fn rank(a: &Matrix) -> usize {
    let mut work = a.clone();
    let (m, n) = (a.rows, a.cols);
    let mut rank = 0;
    let mut largest = 0.0;
    for step in 0..m.min(n) {
        let mut best = (step, step, 0.0);
        for i in step..m {
            for j in step..n {
                let v = work[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if step == 0 {
            largest = best.2;
        }
        if best.2 == 0.0 || best.2 <= RANK_RTOL * largest {
            break;
        }
        swap_rows(&mut work, step, best.0);
        for i in 0..m {
            let tmp = work[(i, step)];
            work[(i, step)] = work[(i, best.1)];
            work[(i, best.1)] = tmp;
        }
        let p = work[(step, step)];
        for i in (step + 1)..m {
            let f = work[(i, step)] / p;
            for j in step..n {
                work[(i, j)] -= f * work[(step, j)];
            }
        }
        rank += 1;
    }
    rank
}

/// Stacked observability matrix `[C; CA; …; CA^{n-1}]`.
pub fn observability_matrix(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::config(format!(
            "observability: A is {}x{}, not square",
            a.rows, a.cols
        )));
    }
    if c.cols != a.rows {
        return Err(Error::config(format!(
            "observability: C has {} columns, A is {}x{}",
            c.cols, a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut data = Vec::with_capacity(n * c.rows * n);
    let mut block = c.clone();
    for _ in 0..n {
        data.extend_from_slice(&block.data);
        block = mat_mul(&block, a)?;
    }
    Matrix::new(n * c.rows, n, data)
}

pub fn observability_rank(a: &Matrix, c: &Matrix) -> Result<usize> {
    Ok(rank(&observability_matrix(a, c)?))
}

/// Orthonormal basis (as columns) of the null space of `m`, via Gram-Schmidt
/// on its rows followed by completion with the standard basis.
fn null_space_basis(m: &Matrix) -> Vec<Vec<f64>> {
    let n = m.cols;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let mut row_basis: Vec<Vec<f64>> = Vec::new();

    let orthogonalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    };

    for i in 0..m.rows {
        let mut v = m.row(i).to_vec();
        let norm = orthogonalize(&mut v, &row_basis);
        if norm > RANK_RTOL * scale {
            row_basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let mut null = Vec::new();
    for e in 0..n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        let all: Vec<Vec<f64>> = row_basis.iter().chain(null.iter()).cloned().collect();
        let norm = orthogonalize(&mut v, &all);
        if norm > 1e-8 {
            null.push(v.iter().map(|x| x / norm).collect());
        }
    }
    null
}

/// Whether every unobservable mode of `(A, C)` is strictly stable.
///
/// The unobservable subspace is `A`-invariant, so `A` restricted to it is
/// `Nᵀ A N` for an orthonormal basis `N`. Its spectral radius is below one
/// iff some power has norm below one; powers are formed by repeated squaring.
pub fn is_detectable(a: &Matrix, c: &Matrix) -> Result<bool> {
    let obs = observability_matrix(a, c)?;
    let basis = null_space_basis(&obs);
    if basis.is_empty() {
        return Ok(true);
    }
    let n = a.rows;
    let k = basis.len();
    let mut nmat = Matrix::zeros(n, k);
    for (j, col) in basis.iter().enumerate() {
        for i in 0..n {
            nmat[(i, j)] = col[i];
        }
    }
    let mut power = mat_mul(&mat_mul(&nmat.transpose(), a)?, &nmat)?;
    for _ in 0..64 {
        let norm = power.max_row_norm();
        if norm < 1.0 {
            return Ok(true);
        }
        if !norm.is_finite() || norm > 1e150 {
            return Ok(false);
        }
        power = mat_mul(&power, &power)?;
    }
    // Spectral radius numerically indistinguishable from one.
    Ok(false)
}

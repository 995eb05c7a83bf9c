//! Minimal dense linear algebra: row-major matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices, Householder QR projected onto SO(n),
//! and LU-based solve/determinant/inverse.
//!
//! Invariants:
//! - `Matrix` entries are finite; shape is fixed at construction.
//! - `sym_eig` returns eigenvalues in ascending order with orthonormal
//!   eigenvector columns (`VᵀV = I` within 1e-10 in f64).
//! - `qr_special_orthogonal` always lands in SO(n): the R diagonal is made
//!   positive by column sign flips and a final column flip repairs the
//!   determinant.

use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[S]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == S::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += aik * brow[j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: S) -> Self {
        let data = self.data.iter().map(|&a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "hadamard shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Largest absolute entry (the elementwise ∞-norm used by tolerances).
    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn norm_fro(&self) -> S {
        self.data.iter().map(|&a| a * a).sum::<S>().sqrt()
    }

    pub fn trace(&self) -> S {
        assert!(self.is_square(), "trace of non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Copies `block` into `self` with its (0,0) entry at (`row_off`, `col_off`).
    pub fn set_block(&mut self, row_off: usize, col_off: usize, block: &Self) {
        assert!(row_off + block.rows <= self.rows && col_off + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.data[(row_off + i) * self.cols + col_off + j] = block.data[i * block.cols + j];
            }
        }
    }

    pub fn block(&self, row_off: usize, col_off: usize, nrows: usize, ncols: usize) -> Self {
        assert!(row_off + nrows <= self.rows && col_off + ncols <= self.cols);
        Self::from_fn(nrows, ncols, |i, j| self.data[(row_off + i) * self.cols + col_off + j])
    }

    /// Accumulates `block` (scaled) into `self` at the given offset.
    pub fn add_block(&mut self, row_off: usize, col_off: usize, block: &Self, scale: S) {
        assert!(row_off + block.rows <= self.rows && col_off + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.data[(row_off + i) * self.cols + col_off + j] +=
                    block.data[i * block.cols + j] * scale;
            }
        }
    }
}

impl<S: Real> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Real> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Spectral decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig<S> {
    /// Ascending eigenvalues.
    pub values: Vec<S>,
    /// Orthonormal eigenvectors as columns, ordered to match `values`.
    pub vectors: Matrix<S>,
}

const MAX_JACOBI_SWEEPS: usize = 50;

/// Full spectral decomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Requires `‖A − Aᵀ‖∞ ≤ 1e-9`.
pub fn sym_eig<S: Real>(a: &Matrix<S>) -> Result<SymEig<S>> {
    if !a.is_square() {
        return Err(Error::Contract(format!(
            "sym_eig requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Contract("sym_eig requires a nonempty matrix".into()));
    }
    // NaN also defeats the asymmetry test below (max and > ignore it), so
    // reject non-finite input here rather than panic sorting NaN eigenvalues.
    if !a.all_finite() {
        return Err(Error::Domain("sym_eig requires finite matrix entries".into()));
    }
    let mut asym = S::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > S::of(1e-9) {
        return Err(Error::Contract(format!("sym_eig requires a symmetric matrix, asymmetry {asym}")));
    }

    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let mut d: Vec<S> = (0..n).map(|i| m[(i, i)]).collect();
    let mut b = d.clone();
    let mut z = vec![S::zero(); n];
    let mut converged = false;

    for sweep in 0..MAX_JACOBI_SWEEPS {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)].abs();
            }
        }
        if off == S::zero() {
            converged = true;
            break;
        }
        let thresh = if sweep < 4 {
            S::of(0.2) * off / S::of((n * n) as f64)
        } else {
            S::zero()
        };
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let g = S::of(100.0) * m[(p, q)].abs();
                // Skip once a rotation would be below representable precision.
                if sweep >= 4 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    m[(p, q)] = S::zero();
                    continue;
                }
                if m[(p, q)].abs() <= thresh {
                    continue;
                }
                let mut h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    m[(p, q)] / h
                } else {
                    let theta = S::of(0.5) * h / m[(p, q)];
                    let mut t = S::one() / (theta.abs() + (S::one() + theta * theta).sqrt());
                    if theta < S::zero() {
                        t = -t;
                    }
                    t
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = t * c;
                let tau = s / (S::one() + c);
                h = t * m[(p, q)];
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                m[(p, q)] = S::zero();
                let rot = |x: &mut S, y: &mut S| {
                    let (gx, gy) = (*x, *y);
                    *x = gx - s * (gy + gx * tau);
                    *y = gy + s * (gx - gy * tau);
                };
                for j in 0..p {
                    let (x, y) = (m[(j, p)], m[(j, q)]);
                    let (mut x, mut y) = (x, y);
                    rot(&mut x, &mut y);
                    m[(j, p)] = x;
                    m[(j, q)] = y;
                }
                for j in (p + 1)..q {
                    let (mut x, mut y) = (m[(p, j)], m[(j, q)]);
                    rot(&mut x, &mut y);
                    m[(p, j)] = x;
                    m[(j, q)] = y;
                }
                for j in (q + 1)..n {
                    let (mut x, mut y) = (m[(p, j)], m[(q, j)]);
                    rot(&mut x, &mut y);
                    m[(p, j)] = x;
                    m[(q, j)] = y;
                }
                for j in 0..n {
                    let (mut x, mut y) = (v[(j, p)], v[(j, q)]);
                    rot(&mut x, &mut y);
                    v[(j, p)] = x;
                    v[(j, q)] = y;
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = S::zero();
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "Jacobi eigensolver exceeded {MAX_JACOBI_SWEEPS} sweeps on a {n}x{n} matrix"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("finite eigenvalues"));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEig { values, vectors })
}

/// Q from the Householder QR of `a`, with the sign convention diag(R) > 0,
/// then a final column flip if needed so that det(Q) = +1.
pub fn qr_special_orthogonal<S: Real>(a: &Matrix<S>) -> Result<Matrix<S>> {
    if !a.is_square() {
        return Err(Error::Contract(format!(
            "qr_special_orthogonal requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Contract("qr_special_orthogonal requires a nonempty matrix".into()));
    }
    let scale = S::one().max(a.max_abs());
    let rank_tol = S::of(1e-12) * scale;
    let mut r = a.clone();
    let mut q: Matrix<S> = Matrix::identity(n);
    // det(Q) parity: each applied reflection and each column negation flips it.
    let mut det_negative = false;

    for k in 0..n.saturating_sub(1) {
        let mut norm_sq = S::zero();
        for i in k..n {
            norm_sq += r[(i, k)] * r[(i, k)];
        }
        let norm = norm_sq.sqrt();
        if norm <= rank_tol {
            return Err(Error::Contract(format!("rank-deficient input: column {k} vanishes")));
        }
        let alpha = if r[(k, k)] >= S::zero() { -norm } else { norm };
        let mut v = vec![S::zero(); n];
        for i in k..n {
            v[i] = r[(i, k)];
        }
        v[k] -= alpha;
        let vtv: S = v[k..].iter().map(|&x| x * x).sum();
        if vtv == S::zero() {
            continue;
        }
        let two_over = S::of(2.0) / vtv;
        // r <- H r with H = I - 2vvᵀ/vᵀv
        for j in k..n {
            let mut dot = S::zero();
            for i in k..n {
                dot += v[i] * r[(i, j)];
            }
            let f = two_over * dot;
            for i in k..n {
                let upd = f * v[i];
                r[(i, j)] = r[(i, j)] - upd;
            }
        }
        // q <- q H
        for i in 0..n {
            let mut dot = S::zero();
            for j in k..n {
                dot += q[(i, j)] * v[j];
            }
            let f = two_over * dot;
            for j in k..n {
                let upd = f * v[j];
                q[(i, j)] = q[(i, j)] - upd;
            }
        }
        det_negative = !det_negative;
    }

    for k in 0..n {
        if r[(k, k)].abs() <= rank_tol {
            return Err(Error::Contract(format!("rank-deficient input: zero pivot at {k}")));
        }
        if r[(k, k)] < S::zero() {
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
            det_negative = !det_negative;
        }
    }
    if det_negative {
        for i in 0..n {
            q[(i, n - 1)] = -q[(i, n - 1)];
        }
    }
    Ok(q)
}

/// LU factorization with partial pivoting. Returns (packed LU, permutation,
/// swap parity). A zero pivot column leaves a zero on the U diagonal.
fn lu_factor<S: Real>(a: &Matrix<S>) -> (Matrix<S>, Vec<usize>, bool) {
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut odd_swaps = false;
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu[(k, k)].abs();
        for i in (k + 1)..n {
            let v = lu[(i, k)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_row != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            perm.swap(k, pivot_row);
            odd_swaps = !odd_swaps;
        }
        let pivot = lu[(k, k)];
        if pivot == S::zero() {
            continue;
        }
        for i in (k + 1)..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            for j in (k + 1)..n {
                let upd = factor * lu[(k, j)];
                lu[(i, j)] = lu[(i, j)] - upd;
            }
        }
    }
    (lu, perm, odd_swaps)
}

fn lu_substitute<S: Real>(lu: &Matrix<S>, perm: &[usize], b: &Matrix<S>) -> Matrix<S> {
    let n = lu.rows();
    let mut x = Matrix::zeros(n, b.cols());
    for c in 0..b.cols() {
        let mut y = vec![S::zero(); n];
        for i in 0..n {
            let mut acc = b[(perm[i], c)];
            for j in 0..i {
                acc = acc - lu[(i, j)] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..n {
                acc = acc - lu[(i, j)] * x[(j, c)];
            }
            x[(i, c)] = acc / lu[(i, i)];
        }
    }
    x
}

fn op_norm_inf<S: Real>(a: &Matrix<S>) -> S {
    let mut worst = S::zero();
    for i in 0..a.rows() {
        let row_sum = a.row(i).iter().map(|&x| x.abs()).sum::<S>();
        worst = worst.max(row_sum);
    }
    worst
}

const COND_LIMIT: f64 = 1e12;

/// Solves `A X = B` by LU with partial pivoting. Errors if `A` is singular or
/// its ∞-norm condition estimate exceeds 1e12.
pub fn solve<S: Real>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if !a.is_square() {
        return Err(Error::Contract(format!("solve requires square A, got {}x{}", a.rows(), a.cols())));
    }
    if a.rows() != b.rows() {
        return Err(Error::Contract(format!(
            "solve shape mismatch: A is {}x{}, B has {} rows",
            a.rows(),
            a.cols(),
            b.rows()
        )));
    }
    let n = a.rows();
    let (lu, perm, _) = lu_factor(a);
    let scale = S::one().max(a.max_abs());
    for k in 0..n {
        if lu[(k, k)].abs() <= S::of(1e-14) * scale {
            return Err(Error::Singular(format!("pivot {k} vanished during elimination")));
        }
    }
    let inv = lu_substitute(&lu, &perm, &Matrix::identity(n));
    let cond = op_norm_inf(a) * op_norm_inf(&inv);
    if cond.to_f64c() > COND_LIMIT {
        return Err(Error::Singular(format!("ill-conditioned system (cond ~ {cond})")));
    }
    Ok(lu_substitute(&lu, &perm, b))
}

/// Determinant via LU; exact zero for structurally singular input.
pub fn det<S: Real>(a: &Matrix<S>) -> S {
    assert!(a.is_square(), "det of non-square matrix");
    let (lu, _, odd_swaps) = lu_factor(a);
    let mut d = if odd_swaps { -S::one() } else { S::one() };
    for k in 0..a.rows() {
        d = d * lu[(k, k)];
    }
    d
}

/// Matrix inverse via LU. Errors on a vanishing pivot; no condition guard
/// (callers that need one should use [`solve`]).
pub fn inverse<S: Real>(a: &Matrix<S>) -> Result<Matrix<S>> {
    assert!(a.is_square(), "inverse of non-square matrix");
    let n = a.rows();
    let (lu, perm, _) = lu_factor(a);
    let scale = S::one().max(a.max_abs());
    for k in 0..n {
        if lu[(k, k)].abs() <= S::of(1e-14) * scale {
            return Err(Error::Singular(format!("pivot {k} vanished during inversion")));
        }
    }
    Ok(lu_substitute(&lu, &perm, &Matrix::identity(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;

    #[test]
    fn sym_eig_identity() {
        let e = sym_eig(&M::identity(3)).unwrap();
        for v in e.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_eig_diagonal_orders_ascending() {
        let e = sym_eig(&M::diag(&[2.0, 0.0])).unwrap();
        assert!((e.values[0] - 0.0).abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
        // Eigenvector for 0 is e2, for 2 is e1.
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_two_by_two_hand_case() {
        let a = M::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let e = sym_eig(&a).unwrap();
        assert!((e.values[0] - 0.0).abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_rejects_asymmetric_and_nonsquare() {
        let a = M::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(sym_eig(&a), Err(Error::Contract(_))));
        let b = M::zeros(2, 3);
        assert!(matches!(sym_eig(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn sym_eig_rejects_non_finite_entries() {
        let a = M::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(Error::Domain(_))));
        let b = M::from_rows(&[vec![f64::INFINITY, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&b), Err(Error::Domain(_))));
    }

    #[test]
    fn sym_eig_reconstructs() {
        // Deterministic pseudo-random symmetric matrix.
        let n = 7;
        let mut a = M::zeros(n, n);
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for i in 0..n {
            for j in i..n {
                let v = next();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let e = sym_eig(&a).unwrap();
        let recon = e.vectors.matmul(&M::diag(&e.values)).matmul(&e.vectors.transpose());
        assert!(recon.sub(&a).max_abs() <= 1e-8 * a.max_abs().max(1.0));
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        assert!(vtv.sub(&M::identity(n)).max_abs() <= 1e-10);
    }

    #[test]
    fn qr_identity_and_sign_fix() {
        let q = qr_special_orthogonal(&M::identity(2)).unwrap();
        assert!(q.sub(&M::identity(2)).max_abs() < 1e-12);
        // diag(1,-1): positive-diagonal convention then det flip lands on I.
        let q = qr_special_orthogonal(&M::diag(&[1.0, -1.0])).unwrap();
        assert!(q.sub(&M::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn qr_det_is_plus_one() {
        let a = M::from_rows(&[vec![0.3, -1.2, 0.7], vec![2.0, 0.1, -0.4], vec![-0.9, 0.5, 1.5]]);
        let q = qr_special_orthogonal(&a).unwrap();
        let qtq = q.transpose().matmul(&q);
        assert!(qtq.sub(&M::identity(3)).max_abs() <= 1e-10);
        assert!((det(&q) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let a = M::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(qr_special_orthogonal(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn solve_trivial_cases() {
        let b = M::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let x = solve(&M::identity(2), &b).unwrap();
        assert!(x.sub(&b).max_abs() < 1e-12);

        let x = solve(&M::identity(2).scale(2.0), &M::identity(2)).unwrap();
        assert!(x.sub(&M::identity(2).scale(0.5)).max_abs() < 1e-12);

        let a = M::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let e1 = M::from_rows(&[vec![1.0], vec![0.0]]);
        let x = solve(&a, &e1).unwrap();
        assert!(x.sub(&e1).max_abs() < 1e-12);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = M::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(solve(&a, &M::identity(2)), Err(Error::Singular(_))));
    }

    #[test]
    fn solve_round_trips() {
        let a = M::from_rows(&[vec![3.0, 1.0, -1.0], vec![1.0, 4.0, 0.5], vec![-1.0, 0.5, 5.0]]);
        let b = M::from_rows(&[vec![1.0], vec![-2.0], vec![0.25]]);
        let x = solve(&a, &b).unwrap();
        assert!(a.matmul(&x).sub(&b).max_abs() <= 1e-9 * b.max_abs());
    }

    #[test]
    fn det_and_inverse_agree() {
        let a = M::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        assert!((det(&a) - 5.0).abs() < 1e-12);
        let inv = inverse(&a).unwrap();
        assert!(a.matmul(&inv).sub(&M::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn generic_scalar_instantiates_f32() {
        let a = Matrix::<f32>::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let e = sym_eig(&a).unwrap();
        assert!((e.values[1] - 2.0).abs() < 1e-5);
    }
}

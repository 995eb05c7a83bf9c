//! Sheaf diffusion: damped Euler iteration of dX/dt = −Δ_F X, the exact
//! t→∞ limit (orthogonal projection onto ker Δ_F), and a strict linear
//! separability check on the limiting node features.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Real;
use crate::sheaf::BlockOperator;

/// Stacked node features X ∈ R^{(n·d)×f}: node u occupies rows
/// [u·d, (u+1)·d), one column per channel.
#[derive(Clone, Debug)]
pub struct FeatureMatrix<S> {
    n: usize,
    d: usize,
    values: Matrix<S>,
}

impl<S: Real> FeatureMatrix<S> {
    pub fn new(n: usize, d: usize, values: Matrix<S>) -> Result<Self> {
        if values.rows() != n * d {
            return Err(Error::Contract(format!(
                "feature matrix has {} rows, expected n·d = {}",
                values.rows(),
                n * d
            )));
        }
        if !values.all_finite() {
            return Err(Error::Contract("feature entries must be finite".into()));
        }
        Ok(FeatureMatrix { n, d, values })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn stalk_dim(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn into_values(self) -> Matrix<S> {
        self.values
    }

    /// n × (d·f) matrix whose row u is node u's d×f block flattened row-major.
    pub fn node_rows_flat(&self) -> Matrix<S> {
        let f = self.channels();
        Matrix::from_fn(self.n, self.d * f, |u, k| self.values[(u * self.d + k / f, k % f)])
    }
}

/// Step size, iteration cap, and convergence threshold for [`diffuse`].
#[derive(Clone, Copy, Debug)]
pub struct DiffusionConfig<S> {
    pub step: S,
    pub max_steps: usize,
    pub tol: S,
}

impl<S: Real> DiffusionConfig<S> {
    pub fn new(step: S, max_steps: usize, tol: S) -> Result<Self> {
        if !(step > S::zero() && step <= S::one()) {
            return Err(Error::Contract(format!("step size must lie in (0,1], got {step}")));
        }
        if !(tol >= S::zero()) {
            return Err(Error::Contract("tolerance must be nonnegative".into()));
        }
        Ok(DiffusionConfig { step, max_steps, tol })
    }
}

/// Convergence record returned alongside the final iterate of [`diffuse`].
#[derive(Clone, Copy, Debug)]
pub struct DiffusionReport<S> {
    pub converged: bool,
    pub steps: usize,
    /// ‖X(t+1) − X(t)‖∞ at the last step taken.
    pub last_delta: S,
}

/// One damped Euler step X ← X − α·Δ·X.
pub fn diffusion_step<S: Real>(
    x: &FeatureMatrix<S>,
    delta: &BlockOperator<S>,
    alpha: S,
) -> FeatureMatrix<S> {
    assert_eq!(delta.side(), x.values.rows(), "operator and features disagree on n·d");
    let step = delta.apply_dense(&x.values).scale(alpha);
    FeatureMatrix { n: x.n, d: x.d, values: x.values.sub(&step) }
}

/// Iterates [`diffusion_step`] until the sup-norm update falls below
/// `cfg.tol` or `cfg.max_steps` is reached. Non-convergence is reported in
/// the result, not an error.
pub fn diffuse<S: Real>(
    x0: &FeatureMatrix<S>,
    delta: &BlockOperator<S>,
    cfg: &DiffusionConfig<S>,
) -> (FeatureMatrix<S>, DiffusionReport<S>) {
    let mut x = x0.clone();
    let mut last_delta = S::zero();
    for t in 0..cfg.max_steps {
        let next = diffusion_step(&x, delta, cfg.step);
        last_delta = next.values.sub(&x.values).max_abs();
        x = next;
        if last_delta <= cfg.tol {
            return (x, DiffusionReport { converged: true, steps: t, last_delta });
        }
    }
    (x, DiffusionReport { converged: false, steps: cfg.max_steps, last_delta })
}

/// Eigenvalues at or below this threshold count as kernel directions.
pub const KERNEL_TOL: f64 = 1e-8;

/// Exact diffusion limit: the orthogonal projection of X(0) onto ker Δ,
/// computed from the eigendecomposition of the dense operator.
pub fn kernel_projection_limit<S: Real>(
    x0: &FeatureMatrix<S>,
    delta: &BlockOperator<S>,
) -> Result<FeatureMatrix<S>> {
    assert_eq!(delta.side(), x0.values.rows(), "operator and features disagree on n·d");
    let eig = linalg::sym_eig(&delta.to_dense())?;
    let nd = delta.side();
    let kernel_dim = eig.values.iter().take_while(|&&l| l <= S::of(KERNEL_TOL)).count();
    let f = x0.channels();
    let mut out = Matrix::zeros(nd, f);
    for k in 0..kernel_dim {
        // out += v_k (v_kᵀ x0)
        for c in 0..f {
            let coef: S = (0..nd).map(|r| eig.vectors[(r, k)] * x0.values[(r, c)]).sum();
            for r in 0..nd {
                out[(r, c)] += eig.vectors[(r, k)] * coef;
            }
        }
    }
    Ok(FeatureMatrix { n: x0.n, d: x0.d, values: out })
}

/// One-vs-rest strict linear separability of labeled feature rows: entry l is
/// true iff some hyperplane puts every class-l row strictly on one side and
/// every other row strictly on the other.
///
/// Decided exactly by minimizing total slack in
/// y_i(wᵀx_i + b) + ξ_i ≥ 1, ξ ≥ 0; separable iff the optimum is ~0.
pub fn linear_separation_check<S: Real>(rows: &Matrix<S>, labels: &[usize]) -> Result<Vec<bool>> {
    if rows.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows but {} labels",
            rows.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("separation check needs at least one node".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(Error::Contract(format!("class {c} has no nodes")));
        }
    }
    let mut out = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if num_classes == 1 {
            out.push(true);
            continue;
        }
        let slack = min_separation_slack(rows, labels, c)?;
        out.push(slack <= 1e-9);
    }
    Ok(out)
}

/// Minimum of Σξ subject to y_i(wᵀx_i + b) + ξ_i ≥ 1, ξ ≥ 0 (one-vs-rest
/// labels y_i = ±1), solved by a dense full-tableau simplex with Bland's
/// rule. Zero iff the class is strictly separable.
fn min_separation_slack<S: Real>(rows: &Matrix<S>, labels: &[usize], class: usize) -> Result<f64> {
    let m = rows.rows();
    let p = rows.cols();
    // Variables: w+ (p), w− (p), b+, b−, ξ (m), surplus s (m).
    let nv = 2 * p + 2 + 2 * m;
    let xi0 = 2 * p + 2;
    let s0 = xi0 + m;
    let mut a = vec![vec![0.0f64; nv]; m];
    for i in 0..m {
        let y = if labels[i] == class { 1.0 } else { -1.0 };
        for j in 0..p {
            let v = y * rows[(i, j)].to_f64c();
            a[i][j] = v;
            a[i][p + j] = -v;
        }
        a[i][2 * p] = y;
        a[i][2 * p + 1] = -y;
        a[i][xi0 + i] = 1.0;
        a[i][s0 + i] = -1.0;
    }
    let mut cost = vec![0.0f64; nv];
    for i in 0..m {
        cost[xi0 + i] = 1.0;
    }
    simplex_min(&mut a, &cost, xi0)
}

/// Full-tableau simplex for min cᵀz, Az = 1, z ≥ 0, started from the basic
/// feasible solution z_{basis0+i} = 1 (those columns must form an identity).
/// Returns the optimal objective value.
fn simplex_min(a: &mut [Vec<f64>], cost: &[f64], basis0: usize) -> Result<f64> {
    let m = a.len();
    let nv = cost.len();
    let mut rhs = vec![1.0f64; m];
    let mut basis: Vec<usize> = (0..m).map(|i| basis0 + i).collect();
    // Reduced-cost row r = c − c_B B⁻¹ A, maintained by the same pivots;
    // the initial basis is the identity ξ block, so B⁻¹ = I here.
    let mut red: Vec<f64> = (0..nv)
        .map(|j| cost[j] - (0..m).map(|i| cost[basis[i]] * a[i][j]).sum::<f64>())
        .collect();
    let mut obj = -rhs.iter().zip(&basis).map(|(&b, &v)| cost[v] * b).sum::<f64>();

    let max_iters = 20_000 + 50 * (m + nv);
    for _ in 0..max_iters {
        // Bland's rule: smallest-index column with negative reduced cost.
        let enter = match (0..nv).find(|&j| red[j] < -1e-10) {
            Some(j) => j,
            None => return Ok(-obj),
        };
        // Ratio test, ties broken by smallest basic variable index.
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if a[i][enter] > 1e-11 {
                let ratio = rhs[i] / a[i][enter];
                let better = ratio < best - 1e-12
                    || (ratio < best + 1e-12
                        && leave.map_or(true, |l| basis[i] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let leave = leave.ok_or_else(|| {
            Error::NonConvergence("separation LP is numerically unbounded".into())
        })?;
        // Pivot on (leave, enter).
        let piv = a[leave][enter];
        for j in 0..nv {
            a[leave][j] /= piv;
        }
        rhs[leave] /= piv;
        for i in 0..m {
            if i != leave && a[i][enter].abs() > 0.0 {
                let w = a[i][enter];
                for j in 0..nv {
                    a[i][j] -= w * a[leave][j];
                }
                rhs[i] -= w * rhs[leave];
                if rhs[i] < 0.0 {
                    rhs[i] = 0.0;
                }
            }
        }
        let w = red[enter];
        for j in 0..nv {
            red[j] -= w * a[leave][j];
        }
        obj -= w * rhs[leave];
        basis[leave] = enter;
    }
    Err(Error::NonConvergence("separation LP exceeded the iteration cap".into()))
}

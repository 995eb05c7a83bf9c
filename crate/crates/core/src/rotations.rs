//! The Cayley transform, uniform and Cayley-family distributions on SO(n),
//! quaternion machinery with an angular-central-Gaussian sampler for SO(3),
//! and the closed-form KL divergences from the uniform distribution.
//!
//! Conventions:
//! - `C(A) = (I−A)⁻¹(I+A)` maps skew-symmetric matrices onto the subset of
//!   SO(n) without eigenvalue −1; `C⁻¹(P) = (P−I)(I+P)⁻¹`.
//! - Skew coordinates pack the strict lower triangle in column-major order:
//!   (2,1),(3,1),…,(n,1),(3,2),… so that for n ≤ 3 the entry rule
//!   x₂₁=φ₁, x₃₁=φ₂, x₃₂=φ₃ holds.
//! - All densities are taken with respect to the normalized Haar measure, so
//!   the uniform density is identically 1.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Coordinates of a skew-symmetric n×n matrix.
#[derive(Clone, Debug)]
pub struct SkewVector<S> {
    n: usize,
    phi: Vec<S>,
}

impl<S: Real> SkewVector<S> {
    pub fn new(n: usize, phi: Vec<S>) -> Result<Self> {
        let want = n * (n - 1) / 2;
        if phi.len() != want {
            return Err(Error::Contract(format!(
                "skew vector for n={n} needs {want} coordinates, got {}",
                phi.len()
            )));
        }
        if !phi.iter().all(|x| x.is_finite()) {
            return Err(Error::Contract("skew coordinates must be finite".into()));
        }
        Ok(SkewVector { n, phi })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &[S] {
        &self.phi
    }
}

/// Element of SO(n), validated on construction.
#[derive(Clone, Debug)]
pub struct Rotation<S> {
    n: usize,
    m: Matrix<S>,
}

const ROTATION_TOL: f64 = 1e-9;

impl<S: Real> Rotation<S> {
    /// Validates orthonormality and determinant +1 within 1e-9.
    pub fn new(m: Matrix<S>) -> Result<Self> {
        if !m.is_square() || m.rows() == 0 {
            return Err(Error::Contract(format!(
                "rotation must be square and nonempty, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let n = m.rows();
        let orth_err = m.transpose().matmul(&m).sub(&Matrix::identity(n)).max_abs();
        if orth_err > S::of(ROTATION_TOL) {
            return Err(Error::Contract(format!("not orthonormal: ‖mᵀm − I‖ = {orth_err}")));
        }
        let d = linalg::det(&m);
        if (d - S::one()).abs() > S::of(ROTATION_TOL) {
            return Err(Error::Contract(format!("determinant {d} is not +1")));
        }
        Ok(Rotation { n, m })
    }

    pub fn identity(n: usize) -> Self {
        Rotation { n, m: Matrix::identity(n) }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Matrix<S> {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.m
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &Rotation<S>) -> Rotation<S> {
        assert_eq!(self.n, other.n, "rotation dimension mismatch");
        Rotation { n: self.n, m: self.m.matmul(&other.m) }
    }

    pub fn transpose(&self) -> Rotation<S> {
        Rotation { n: self.n, m: self.m.transpose() }
    }
}

/// Parameters (M, κ) of the rotation distribution family: mode `M`,
/// concentration κ ∈ [0,1) with κ=0 the uniform distribution.
#[derive(Clone, Debug)]
pub struct CayleyParams<S> {
    pub mean: Rotation<S>,
    pub kappa: S,
}

impl<S: Real> CayleyParams<S> {
    pub fn new(mean: Rotation<S>, kappa: S) -> Result<Self> {
        if !(kappa >= S::zero() && kappa < S::one()) {
            return Err(Error::Contract(format!("kappa must lie in [0,1), got {kappa}")));
        }
        Ok(CayleyParams { mean, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// Unit 4-vector (a,b,c,d) on S³.
#[derive(Clone, Copy, Debug)]
pub struct UnitQuaternion<S> {
    a: S,
    b: S,
    c: S,
    d: S,
}

impl<S: Real> UnitQuaternion<S> {
    pub fn new(a: S, b: S, c: S, d: S) -> Result<Self> {
        let norm_sq = a * a + b * b + c * c + d * d;
        if (norm_sq - S::one()).abs() > S::of(1e-10) {
            return Err(Error::Contract(format!("quaternion norm² = {norm_sq}, expected 1")));
        }
        Ok(UnitQuaternion { a, b, c, d })
    }

    /// Normalizes a nonzero 4-vector onto S³.
    pub fn from_unnormalized(a: S, b: S, c: S, d: S) -> Result<Self> {
        let norm = (a * a + b * b + c * c + d * d).sqrt();
        if norm <= S::of(1e-150) {
            return Err(Error::Domain("cannot normalize a zero 4-vector".into()));
        }
        Ok(UnitQuaternion { a: a / norm, b: b / norm, c: c / norm, d: d / norm })
    }

    pub fn components(&self) -> (S, S, S, S) {
        (self.a, self.b, self.c, self.d)
    }
}

/// Parameter matrix Λ of an angular central Gaussian on S³: the law of
/// `z/‖z‖` for `z ~ N(0, Λ)`.
#[derive(Clone, Debug)]
pub struct ACGParams<S> {
    lambda: Matrix<S>,
}

impl<S: Real> ACGParams<S> {
    pub fn new(lambda: Matrix<S>) -> Result<Self> {
        if lambda.rows() != 4 || lambda.cols() != 4 {
            return Err(Error::Contract("ACG parameter matrix must be 4x4".into()));
        }
        if lambda.sub(&lambda.transpose()).max_abs() > S::of(1e-10) {
            return Err(Error::Contract("ACG parameter matrix must be symmetric".into()));
        }
        let eig = linalg::sym_eig(&lambda)?;
        if eig.values[0] <= S::zero() {
            return Err(Error::Contract(format!(
                "ACG parameter matrix must be positive definite, min eigenvalue {}",
                eig.values[0]
            )));
        }
        Ok(ACGParams { lambda })
    }

    pub fn lambda(&self) -> &Matrix<S> {
        &self.lambda
    }
}

/// Expands packed skew coordinates into the skew-symmetric matrix X_φ.
pub fn skew_from_vec<S: Real>(phi: &SkewVector<S>) -> Matrix<S> {
    let n = phi.n;
    let mut x = Matrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in (j + 1)..n {
            x[(i, j)] = phi.phi[k];
            x[(j, i)] = -phi.phi[k];
            k += 1;
        }
    }
    x
}

/// Inverse of [`skew_from_vec`]: packs the strict lower triangle.
pub fn vec_from_skew<S: Real>(x: &Matrix<S>) -> Result<SkewVector<S>> {
    if !x.is_square() {
        return Err(Error::Contract("skew matrix must be square".into()));
    }
    let n = x.rows();
    if x.add(&x.transpose()).max_abs() > S::of(1e-9) {
        return Err(Error::Contract("matrix is not skew-symmetric".into()));
    }
    let mut phi = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for i in (j + 1)..n {
            phi.push(x[(i, j)]);
        }
    }
    SkewVector::new(n, phi)
}

/// The Cayley transform `C(A) = (I−A)⁻¹(I+A)` of a skew-symmetric matrix.
/// Always lands in SO(n) and never has eigenvalue −1.
pub fn cayley<S: Real>(a: &Matrix<S>) -> Result<Rotation<S>> {
    if !a.is_square() {
        return Err(Error::Contract("cayley requires a square matrix".into()));
    }
    if a.add(&a.transpose()).max_abs() > S::of(1e-9) {
        return Err(Error::Contract("cayley requires a skew-symmetric matrix".into()));
    }
    let n = a.rows();
    let i = Matrix::identity(n);
    let p = linalg::solve(&i.sub(a), &i.add(a))?;
    Rotation::new(p)
}

fn smallest_singular_value_i_plus<S: Real>(p: &Matrix<S>) -> Result<S> {
    let b = Matrix::identity(p.rows()).add(p);
    let eig = linalg::sym_eig(&b.transpose().matmul(&b))?;
    Ok(eig.values[0].max(S::zero()).sqrt())
}

const CAYLEY_CUT_TOL: f64 = 1e-9;

/// `C⁻¹(P) = (P−I)(I+P)⁻¹`, defined away from the measure-zero set where P
/// has eigenvalue −1 (detected via the smallest singular value of I+P).
pub fn cayley_inverse<S: Real>(p: &Rotation<S>) -> Result<Matrix<S>> {
    let n = p.dim();
    let i = Matrix::identity(n);
    let sigma_min = smallest_singular_value_i_plus(p.matrix())?;
    if sigma_min <= S::of(CAYLEY_CUT_TOL) {
        return Err(Error::Domain(format!(
            "rotation has eigenvalue -1 within tolerance (sigma_min(I+P) = {sigma_min})"
        )));
    }
    // A = (P−I)(I+P)⁻¹ computed through the transposed system, then
    // symmetrized so the result is exactly skew.
    let at = linalg::solve(&i.add(p.matrix()).transpose(), &p.matrix().sub(&i).transpose())?;
    let a = at.transpose();
    Ok(a.sub(&a.transpose()).scale(S::of(0.5)))
}

/// Jacobian of the vectorized Cayley transform at φ:
/// `2^{3n(n−1)/4} / det(I+X_φ)^{n−1}`.
pub fn cayley_jacobian<S: Real>(phi: &SkewVector<S>) -> S {
    let n = phi.n;
    let x = skew_from_vec(phi);
    let base = S::of(2.0).powf(S::of(0.75 * (n * (n - 1)) as f64));
    let d = linalg::det(&Matrix::identity(n).add(&x));
    base / d.powi(n as i32 - 1)
}

/// Haar-uniform sample from SO(n): QR of an n×n standard Gaussian matrix with
/// the positive-diagonal sign convention and determinant repair.
pub fn sample_uniform_so<S, R>(n: usize, rng: &mut R) -> Result<Rotation<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    if n == 0 {
        return Err(Error::Contract("sample_uniform_so requires n >= 1".into()));
    }
    if n == 1 {
        return Ok(Rotation::identity(1));
    }
    // Rank deficiency has probability zero; retry a few times regardless.
    for _ in 0..4 {
        let g = Matrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        match linalg::qr_special_orthogonal(&g) {
            Ok(q) => return Rotation::new(q),
            Err(_) => continue,
        }
    }
    Err(Error::NonConvergence("Gaussian draws kept producing rank-deficient matrices".into()))
}

/// Density of the (M,κ) rotation distribution at P, with respect to the
/// normalized Haar measure: `(1−κ²)^{n(n−1)/2} · det(PMᵀ − κI)^{1−n}`.
pub fn cayley_density<S: Real>(p: &Rotation<S>, params: &CayleyParams<S>) -> Result<S> {
    let n = params.dim();
    if p.dim() != n {
        return Err(Error::Contract(format!(
            "dimension mismatch: sample is SO({}), parameters are SO({n})",
            p.dim()
        )));
    }
    let kappa = params.kappa;
    let rel = p.matrix().matmul(&params.mean.matrix().transpose());
    let z = rel.sub(&Matrix::identity(n).scale(kappa));
    let front = (S::one() - kappa * kappa).powi((n * (n - 1) / 2) as i32);
    Ok(front * linalg::det(&z).powi(1 - n as i32))
}

const SAMPLE_RETRIES: usize = 8;

/// Draws from the (M,κ) family by the definitional path: X Haar-uniform,
/// skew part shrunk by (1−κ)/(1+κ), mapped back through the Cayley transform,
/// then right-translated by M. Redraws (bounded) if X hits the Cayley cut.
pub fn sample_cayley<S, R>(params: &CayleyParams<S>, rng: &mut R) -> Result<Rotation<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    let n = params.dim();
    if n == 1 {
        return Ok(Rotation::identity(1));
    }
    let shrink = (S::one() - params.kappa) / (S::one() + params.kappa);
    for _ in 0..SAMPLE_RETRIES {
        let x = sample_uniform_so(n, rng)?;
        let a = match cayley_inverse(&x) {
            Ok(a) => a,
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        };
        let y = cayley(&a.scale(shrink))?;
        return Ok(y.compose(&params.mean));
    }
    Err(Error::NonConvergence(format!(
        "uniform draw hit the Cayley cut {SAMPLE_RETRIES} times in a row"
    )))
}

/// The 2-fold cover S³ → SO(3) in explicit matrix form; Φ(q) = Φ(−q).
pub fn quaternion_to_rotation<S: Real>(q: &UnitQuaternion<S>) -> Rotation<S> {
    let (a, b, c, d) = q.components();
    let two = S::of(2.0);
    let m = Matrix::from_rows(&[
        vec![a * a + b * b - c * c - d * d, two * (b * c - a * d), two * (b * d + a * c)],
        vec![two * (b * c + a * d), a * a - b * b + c * c - d * d, two * (c * d - a * b)],
        vec![two * (b * d - a * c), two * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]);
    Rotation { n: 3, m }
}

/// A unit quaternion q with Φ(q) = R, extracted by the branch-by-largest-
/// diagonal method (either of ±q is a valid answer).
pub fn rotation_to_quaternion<S: Real>(r: &Rotation<S>) -> Result<UnitQuaternion<S>> {
    if r.dim() != 3 {
        return Err(Error::Contract("quaternion extraction requires SO(3)".into()));
    }
    let m = r.matrix();
    let tr = m.trace();
    let quarter = S::of(0.25);
    let (a, b, c, d);
    if tr >= m[(0, 0)] && tr >= m[(1, 1)] && tr >= m[(2, 2)] {
        let s = (S::one() + tr).sqrt();
        a = S::of(0.5) * s;
        let w = quarter / a;
        b = (m[(2, 1)] - m[(1, 2)]) * w;
        c = (m[(0, 2)] - m[(2, 0)]) * w;
        d = (m[(1, 0)] - m[(0, 1)]) * w;
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (S::one() + S::of(2.0) * m[(0, 0)] - tr).sqrt();
        b = S::of(0.5) * s;
        let w = quarter / b;
        a = (m[(2, 1)] - m[(1, 2)]) * w;
        c = (m[(1, 0)] + m[(0, 1)]) * w;
        d = (m[(0, 2)] + m[(2, 0)]) * w;
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (S::one() + S::of(2.0) * m[(1, 1)] - tr).sqrt();
        c = S::of(0.5) * s;
        let w = quarter / c;
        a = (m[(0, 2)] - m[(2, 0)]) * w;
        b = (m[(1, 0)] + m[(0, 1)]) * w;
        d = (m[(2, 1)] + m[(1, 2)]) * w;
    } else {
        let s = (S::one() + S::of(2.0) * m[(2, 2)] - tr).sqrt();
        d = S::of(0.5) * s;
        let w = quarter / d;
        a = (m[(1, 0)] - m[(0, 1)]) * w;
        b = (m[(0, 2)] + m[(2, 0)]) * w;
        c = (m[(2, 1)] + m[(1, 2)]) * w;
    }
    UnitQuaternion::from_unnormalized(a, b, c, d)
}

/// The 4×4 matrix of z ↦ z·y (right quaternion multiplication), an element
/// of SO(4).
fn right_multiplication_matrix<S: Real>(y: &UnitQuaternion<S>) -> Matrix<S> {
    let (y0, y1, y2, y3) = y.components();
    Matrix::from_rows(&[
        vec![y0, -y1, -y2, -y3],
        vec![y1, y0, y3, -y2],
        vec![y2, -y3, y0, y1],
        vec![y3, y2, -y1, y0],
    ])
}

/// Λ_{M,κ} = Qᵀ Λ_κ Q with Λ_κ = diag(((1+κ)/(1−κ))², 1, 1, 1) and Q the
/// right-multiplication matrix of a unit quaternion y with Φ(y) = Mᵀ.
pub fn acg_params<S: Real>(params: &CayleyParams<S>) -> Result<ACGParams<S>> {
    if params.dim() != 3 {
        return Err(Error::Contract("ACG parameterization requires SO(3)".into()));
    }
    let gamma = (S::one() + params.kappa) / (S::one() - params.kappa);
    let y = rotation_to_quaternion(&params.mean.transpose())?;
    let q = right_multiplication_matrix(&y);
    let lam_kappa = Matrix::diag(&[gamma * gamma, S::one(), S::one(), S::one()]);
    let lambda = q.transpose().matmul(&lam_kappa).matmul(&q);
    // Symmetrize away roundoff before validating.
    let lambda = lambda.add(&lambda.transpose()).scale(S::of(0.5));
    ACGParams::new(lambda)
}

/// Draws from the (M,κ) family on SO(3) through the angular central Gaussian:
/// z ~ N(0, Λ_{M,κ}) on R⁴, normalized to S³, pushed through Φ.
pub fn acg_sample_so3<S, R>(params: &CayleyParams<S>, rng: &mut R) -> Result<Rotation<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    if params.dim() != 3 {
        return Err(Error::Contract("acg_sample_so3 requires SO(3) parameters".into()));
    }
    let gamma = (S::one() + params.kappa) / (S::one() - params.kappa);
    let y = rotation_to_quaternion(&params.mean.transpose())?;
    let q_t = right_multiplication_matrix(&y).transpose();
    for _ in 0..SAMPLE_RETRIES {
        // z = Qᵀ Λ_κ^{1/2} g has covariance Qᵀ Λ_κ Q.
        let mut g: Vec<S> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        g[0] = g[0] * gamma;
        let z: Vec<S> = (0..4)
            .map(|i| (0..4).map(|j| q_t[(i, j)] * g[j]).sum())
            .collect();
        match UnitQuaternion::from_unnormalized(z[0], z[1], z[2], z[3]) {
            Ok(u) => return Ok(quaternion_to_rotation(&u)),
            Err(_) => continue,
        }
    }
    Err(Error::NonConvergence("Gaussian draws kept collapsing to zero length".into()))
}

/// KL divergence of the (M,κ) family from the uniform distribution on SO(n);
/// closed forms exist for n ∈ {2,3} and are independent of M.
pub fn kl_cayley_uniform<S: Real>(kappa: S, n: usize) -> Result<S> {
    if !(kappa >= S::zero() && kappa < S::one()) {
        return Err(Error::Contract(format!("kappa must lie in [0,1), got {kappa}")));
    }
    let one = S::one();
    match n {
        2 => Ok(-(one - kappa * kappa).ln()),
        3 => Ok(-(one - kappa * kappa).ln() - S::of(2.0) * (one - kappa).ln() - S::of(2.0) * kappa),
        _ => Err(Error::UnsupportedDimension(format!(
            "no closed-form KL for SO({n}); use the Monte Carlo estimator"
        ))),
    }
}

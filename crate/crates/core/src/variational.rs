//! Reparameterized sampling, KL terms, ELBO estimation, and KL annealing.
//!
//! The posterior over restriction maps factors across incidences, so its KL
//! from the prior is the sum of per-incidence terms. Coordinate families use
//! the Gaussian closed form against a standard normal prior; the rotation
//! family uses the closed form against the uniform prior for d ∈ {2, 3} and
//! falls back to a sampled log-ratio estimate beyond that (the uniform
//! prior's log-density is identically 0 w.r.t. normalized Haar, the
//! convention used throughout).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::model::{
    compute_gradients, draw_noise, forward, Family, KlTerm, SheafModel, TapeBinding,
    TapePosterior,
};
use crate::nn::tape::{Tape, ValueRef};
use crate::rotations::{self, CayleyParams, Rotation};
use crate::scalar::Real;
use crate::sheaf::{Graph, RestrictionMap};

/// Variational parameters of one incidence.
#[derive(Clone, Debug)]
pub enum IncidenceParams<S> {
    Gaussian { mu: Vec<S>, sigma: Vec<S> },
    Rotation { mean: Rotation<S>, kappa: S },
}

/// The factorized posterior: one parameter record per incidence (2|E|).
#[derive(Clone, Debug)]
pub struct PosteriorParams<S> {
    family: Family,
    stalk_dim: usize,
    entries: Vec<IncidenceParams<S>>,
}

impl<S: Real> PosteriorParams<S> {
    pub fn new(family: Family, stalk_dim: usize, entries: Vec<IncidenceParams<S>>) -> Result<Self> {
        if family == Family::Identity {
            return Err(Error::Contract("identity ablation has no posterior".into()));
        }
        let coord_dim = match family {
            Family::Diagonal => stalk_dim,
            Family::General => stalk_dim * stalk_dim,
            _ => 0,
        };
        for (i, entry) in entries.iter().enumerate() {
            match (family, entry) {
                (Family::Diagonal | Family::General, IncidenceParams::Gaussian { mu, sigma }) => {
                    if mu.len() != coord_dim || sigma.len() != coord_dim {
                        return Err(Error::Contract(format!(
                            "incidence {i}: expected {coord_dim} coordinates"
                        )));
                    }
                    if sigma.iter().any(|&s| !(s > S::zero()) || !s.is_finite()) {
                        return Err(Error::Contract(format!("incidence {i}: sigma must be > 0")));
                    }
                    if mu.iter().any(|m| !m.is_finite()) {
                        return Err(Error::Contract(format!("incidence {i}: mu must be finite")));
                    }
                }
                (Family::SpecialOrthogonal, IncidenceParams::Rotation { mean, kappa }) => {
                    if mean.matrix().rows() != stalk_dim {
                        return Err(Error::Contract(format!(
                            "incidence {i}: mean rotation must be {stalk_dim}x{stalk_dim}"
                        )));
                    }
                    if !(*kappa >= S::zero() && *kappa < S::one()) {
                        return Err(Error::Contract(format!(
                            "incidence {i}: kappa must lie in [0, 1)"
                        )));
                    }
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "incidence {i}: parameter record does not match family"
                    )))
                }
            }
        }
        Ok(PosteriorParams { family, stalk_dim, entries })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn stalk_dim(&self) -> usize {
        self.stalk_dim
    }

    pub fn entries(&self) -> &[IncidenceParams<S>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Snapshot of a tape-level posterior into value-level records.
pub fn extract_posterior<S: Real>(
    tape: &Tape<S>,
    posterior: &TapePosterior,
    stalk_dim: usize,
) -> Result<PosteriorParams<S>> {
    let entries = match posterior.family {
        Family::Diagonal | Family::General => {
            let mu = tape.value(posterior.mu.expect("gaussian posterior"));
            let sigma = tape.value(posterior.sigma.expect("gaussian posterior"));
            (0..mu.rows())
                .map(|i| IncidenceParams::Gaussian {
                    mu: mu.row(i).to_vec(),
                    sigma: sigma.row(i).to_vec(),
                })
                .collect()
        }
        Family::SpecialOrthogonal => {
            let kappa = tape.value(posterior.kappa.expect("rotation posterior"));
            posterior
                .means
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    Ok(IncidenceParams::Rotation {
                        mean: Rotation::new(tape.value(m).clone())?,
                        kappa: kappa[(i, 0)],
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Family::Identity => unreachable!("identity ablation has no posterior"),
    };
    PosteriorParams::new(posterior.family, stalk_dim, entries)
}

/// diag(μ + σ⊙ε).
pub fn reparam_diagonal<S: Real>(mu: &[S], sigma: &[S], eps: &[S]) -> RestrictionMap<S> {
    assert_eq!(mu.len(), sigma.len());
    assert_eq!(mu.len(), eps.len());
    let entries: Vec<S> = mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    RestrictionMap::diagonal(entries).expect("finite reparameterized entries")
}

/// Row-major d×d reshape of μ + σ⊙ε.
pub fn reparam_general<S: Real>(mu: &[S], sigma: &[S], eps: &[S]) -> RestrictionMap<S> {
    assert_eq!(mu.len(), sigma.len());
    assert_eq!(mu.len(), eps.len());
    let d2 = mu.len();
    let d = (d2 as f64).sqrt().round() as usize;
    assert_eq!(d * d, d2, "general family needs d*d coordinates");
    let entries: Vec<S> = mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    RestrictionMap::general(Matrix::from_vec(d, d, entries)).expect("finite entries")
}

/// Y = C((1−κ)/(1+κ)·C⁻¹(X))·M with X the given Haar-uniform noise; the
/// noise is a constant of the transform, so gradients flow to M and κ only.
pub fn reparam_special_orthogonal<S: Real>(
    params: &CayleyParams<S>,
    noise: &Rotation<S>,
) -> Result<RestrictionMap<S>> {
    let kappa = params.kappa;
    let shrink = (S::one() - kappa) / (S::one() + kappa);
    let b = rotations::cayley_inverse(noise)?;
    let y = rotations::cayley(&b.scale(shrink))?;
    Ok(RestrictionMap::SpecialOrthogonal(y.compose(&params.mean)))
}

/// −½ Σ (1 + ln σ² − μ² − σ²): KL of N(μ, diag σ²) from N(0, I).
pub fn kl_gaussian_standard<S: Real>(mu: &[S], sigma: &[S]) -> S {
    assert_eq!(mu.len(), sigma.len());
    let mut total = S::zero();
    for (&m, &s) in mu.iter().zip(sigma) {
        let s2 = s * s;
        total += S::one() + s2.ln() - m * m - s2;
    }
    -S::of(0.5) * total
}

/// Closed-form KL of a posterior from its prior, or the marker demanding
/// the sampled estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlOutcome<S> {
    Closed(S),
    /// No closed form (rotations with d ≥ 4): use the sampled log-ratio.
    NeedsMc,
}

/// Sum of per-incidence KL terms (the factorized posterior's chain rule).
pub fn kl_total<S: Real>(posterior: &PosteriorParams<S>) -> KlOutcome<S> {
    match posterior.family() {
        Family::Diagonal | Family::General => KlOutcome::Closed(
            posterior
                .entries()
                .iter()
                .map(|e| match e {
                    IncidenceParams::Gaussian { mu, sigma } => kl_gaussian_standard(mu, sigma),
                    _ => unreachable!("validated at construction"),
                })
                .sum(),
        ),
        Family::SpecialOrthogonal => {
            let d = posterior.stalk_dim();
            if d > 3 {
                return KlOutcome::NeedsMc;
            }
            KlOutcome::Closed(
                posterior
                    .entries()
                    .iter()
                    .map(|e| match e {
                        IncidenceParams::Rotation { kappa, .. } => {
                            rotations::kl_cayley_uniform(*kappa, d)
                                .expect("closed form exists for d <= 3")
                        }
                        _ => unreachable!("validated at construction"),
                    })
                    .sum(),
            )
        }
        Family::Identity => unreachable!("identity ablation has no posterior"),
    }
}

/// One evaluated training objective.
#[derive(Clone, Copy, Debug)]
pub struct ElboBreakdown<S> {
    pub nll: S,
    pub kl: S,
    pub lambda: S,
    pub total: S,
}

impl<S: Real> ElboBreakdown<S> {
    pub fn new(nll: S, kl: S, lambda: S) -> Self {
        ElboBreakdown { nll, kl, lambda, total: nll + lambda * kl }
    }
}

/// Tape handles of one built objective: total = nll + λ·kl.
#[derive(Clone, Copy, Debug)]
pub struct ElboRefs {
    pub total: ValueRef,
    pub nll: ValueRef,
    pub kl: ValueRef,
}

/// Builds the K-sample objective on the tape: the likelihood term averages
/// K independent forward passes (each drawing one sheaf per layer), the KL
/// term is the closed form where one exists and the averaged sampled
/// log-ratio otherwise, and the identity ablation contributes no KL.
/// `train` enables dropout masks inside each pass.
#[allow(clippy::too_many_arguments)]
pub fn build_elbo<S, R>(
    model: &SheafModel<S>,
    tape: &mut Tape<S>,
    binding: &TapeBinding,
    graph: &Graph<S>,
    observed: &[usize],
    k_samples: usize,
    lambda: S,
    train: bool,
    rng: &mut R,
) -> Result<ElboRefs>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    if k_samples == 0 {
        return Err(Error::Contract("need at least one objective sample".into()));
    }
    let mut nll_terms = Vec::with_capacity(k_samples);
    let mut mc_terms = Vec::new();
    let mut closed_kl: Option<ValueRef> = None;
    for _ in 0..k_samples {
        let noise = draw_noise(model, graph, train, rng)?;
        let out = forward(model, tape, binding, graph, &noise)?;
        nll_terms.push(tape.masked_nll(out.logits, graph.labels(), observed));
        match out.kl {
            KlTerm::Absent => {}
            // The posterior is noise-free, so every pass yields the same
            // closed form; keep the first.
            KlTerm::Closed(r) => closed_kl = closed_kl.or(Some(r)),
            KlTerm::MonteCarlo(r) => mc_terms.push(r),
        }
    }
    let nll_sum = tape.add_n(nll_terms);
    let nll = tape.scale(nll_sum, S::one() / S::of(k_samples as f64));
    let kl = match closed_kl {
        Some(r) => r,
        None if !mc_terms.is_empty() => {
            let total = tape.add_n(mc_terms);
            tape.scale(total, S::one() / S::of(k_samples as f64))
        }
        None => tape.constant(Matrix::zeros(1, 1)),
    };
    let weighted = tape.scale(kl, lambda);
    let total = tape.add(nll, weighted);
    Ok(ElboRefs { total, nll, kl })
}

/// Evaluates the objective once: K forward passes, fresh noise, no
/// parameter updates.
pub fn elbo_estimate<S, R>(
    model: &SheafModel<S>,
    graph: &Graph<S>,
    observed: &[usize],
    k_samples: usize,
    lambda: S,
    rng: &mut R,
) -> Result<ElboBreakdown<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let refs =
        build_elbo(model, &mut tape, &binding, graph, observed, k_samples, lambda, false, rng)?;
    Ok(ElboBreakdown {
        nll: tape.scalar_value(refs.nll),
        kl: tape.scalar_value(refs.kl),
        lambda,
        total: tape.scalar_value(refs.total),
    })
}

/// Objective gradients for one K-sample draw, keyed by parameter name.
/// `train` enables dropout masks inside the forward passes.
#[allow(clippy::too_many_arguments)]
pub fn elbo_gradients<S, R>(
    model: &SheafModel<S>,
    graph: &Graph<S>,
    observed: &[usize],
    k_samples: usize,
    lambda: S,
    train: bool,
    rng: &mut R,
) -> Result<(ElboBreakdown<S>, std::collections::BTreeMap<String, Matrix<S>>)>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let refs =
        build_elbo(model, &mut tape, &binding, graph, observed, k_samples, lambda, train, rng)?;
    let breakdown = ElboBreakdown {
        nll: tape.scalar_value(refs.nll),
        kl: tape.scalar_value(refs.kl),
        lambda,
        total: tape.scalar_value(refs.total),
    };
    let grads = compute_gradients(&mut tape, refs.total, &binding);
    Ok((breakdown, grads))
}

/// Cyclic KL annealing weight.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule<S> {
    pub cycle_length: usize,
    pub ramp_fraction: S,
}

impl<S: Real> AnnealSchedule<S> {
    pub fn new(cycle_length: usize, ramp_fraction: S) -> Result<Self> {
        if cycle_length == 0 {
            return Err(Error::Contract("cycle_length must be >= 1".into()));
        }
        if !(ramp_fraction > S::zero() && ramp_fraction <= S::one()) {
            return Err(Error::Contract("ramp_fraction must lie in (0, 1]".into()));
        }
        Ok(AnnealSchedule { cycle_length, ramp_fraction })
    }
}

/// λ(epoch) = min(1, frac/ramp) with frac = (epoch mod cycle)/cycle.
pub fn kl_anneal_weight<S: Real>(epoch: usize, schedule: &AnnealSchedule<S>) -> S {
    let frac = S::of((epoch % schedule.cycle_length) as f64)
        / S::of(schedule.cycle_length as f64);
    (frac / schedule.ramp_fraction).min(S::one())
}

//! The sheaf convolution network and its variational sheaf learner.
//!
//! Forward structure per pass (one sheaf sample per layer, all drawn from
//! the shared learned posterior):
//!
//! 1. learner path: resize features to k = d·f columns, concatenate
//!    endpoint rows per incidence, run the learner MLP, squash raw outputs
//!    into per-incidence posterior parameters;
//! 2. feature path: a small MLP to k columns, reshaped node-major /
//!    stalk-minor into an (n·d)×f stack;
//! 3. per layer: sample restriction maps, assemble the normalized sheaf
//!    Laplacian blocks on the tape, apply X ← X − σ(Δ (I⊗W1) X W2);
//! 4. readout: reshape to n×(d·f) rows and map linearly to class logits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::tape::{Tape, ValueRef};
use crate::rotations;
use crate::scalar::Real;
use crate::sheaf::Graph;

/// Restriction-map family the model trains, or the frozen-identity ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Diagonal,
    SpecialOrthogonal,
    General,
    /// No learner, no KL: the sheaf is frozen at the identity.
    Identity,
}

impl Family {
    /// Raw learner outputs per incidence.
    pub fn learner_output_dim(&self, d: usize) -> usize {
        match self {
            Family::Diagonal => 2 * d,
            Family::General => 2 * d * d,
            Family::SpecialOrthogonal => d * (d - 1) / 2 + 1,
            Family::Identity => 0,
        }
    }
}

/// Elementwise nonlinearity of the conv layer; `Identity` is a test hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Identity,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub layers: usize,
    pub stalk_dim: usize,
    pub channels: usize,
    /// Hidden widths of the learner MLP.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(layers: usize, stalk_dim: usize, channels: usize) -> Result<Self> {
        if layers == 0 || stalk_dim == 0 || channels == 0 {
            return Err(Error::Contract("layers, stalk_dim, channels must be >= 1".into()));
        }
        let k = stalk_dim * channels;
        Ok(LayerSpec {
            layers,
            stalk_dim,
            channels,
            hidden: vec![2 * k],
            activation: Activation::Elu,
        })
    }

    pub fn resized_width(&self) -> usize {
        self.stalk_dim * self.channels
    }
}

/// Named parameter tensors in stable insertion order.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ParameterStore<S> {
    names: Vec<String>,
    values: Vec<Matrix<S>>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl<S: Real> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Matrix<S>) {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Matrix<S> {
        &self.values[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix<S> {
        &mut self.values[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Insertion-ordered iteration; the order is part of the determinism
    /// contract (it fixes RNG consumption and tape layout).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

/// Parameters whose names start here belong to the sheaf-learner group φ;
/// everything else is the task group θ.
pub const SHEAF_GROUP_PREFIX: &str = "sheaf.";

/// The full model: family, architecture, and parameters.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SheafModel<S> {
    pub family: Family,
    pub spec: LayerSpec,
    pub in_features: usize,
    pub num_classes: usize,
    /// Eigenvalue floor of the degree-block inverse square root.
    pub eps: S,
    pub kappa_max: S,
    /// Drop rates in [0, 1), applied at training time only (inverted
    /// dropout: surviving entries are rescaled by 1/keep).
    pub dropout_input: S,
    pub dropout_layer: S,
    pub params: ParameterStore<S>,
}

fn uniform_init<S, R>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<S>
where
    S: Real,
    R: Rng + ?Sized,
{
    let bound = (fan_in as f64).sqrt().recip();
    Matrix::from_fn(rows, cols, |_, _| S::of(rng.random_range(-bound..bound)))
}

impl<S: Real> SheafModel<S> {
    /// Fresh model with uniform ±1/√fan_in weights; the learner's final
    /// layer starts at zero so the posterior opens at μ=0 / M=I.
    pub fn init<R: Rng + ?Sized>(
        family: Family,
        spec: LayerSpec,
        in_features: usize,
        num_classes: usize,
        eps: S,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Contract("need at least one class".into()));
        }
        let d = spec.stalk_dim;
        let f = spec.channels;
        let k = spec.resized_width();
        let m = in_features;
        let mut params = ParameterStore::new();

        if family != Family::Identity {
            params.insert("sheaf.resize.w", uniform_init(k, m, m, rng));
            params.insert("sheaf.resize.b", uniform_init(1, k, m, rng));
            let out = family.learner_output_dim(d);
            let mut widths = vec![2 * k];
            widths.extend_from_slice(&spec.hidden);
            widths.push(out);
            for (l, pair) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let last = l + 2 == widths.len();
                let (w, b) = if last {
                    (Matrix::zeros(fan_out, fan_in), Matrix::zeros(1, fan_out))
                } else {
                    (
                        uniform_init(fan_out, fan_in, fan_in, rng),
                        uniform_init(1, fan_out, fan_in, rng),
                    )
                };
                params.insert(&format!("sheaf.mlp.{l}.w"), w);
                params.insert(&format!("sheaf.mlp.{l}.b"), b);
            }
        }

        params.insert("feat.0.w", uniform_init(k, m, m, rng));
        params.insert("feat.0.b", uniform_init(1, k, m, rng));
        params.insert("feat.1.w", uniform_init(k, k, k, rng));
        params.insert("feat.1.b", uniform_init(1, k, k, rng));
        for t in 0..spec.layers {
            params.insert(&format!("conv.{t}.w1"), uniform_init(d, d, d, rng));
            params.insert(&format!("conv.{t}.w2"), uniform_init(f, f, f, rng));
        }
        params.insert("read.w", uniform_init(num_classes, k, k, rng));
        params.insert("read.b", uniform_init(1, num_classes, k, rng));

        Ok(SheafModel {
            family,
            spec,
            in_features,
            num_classes,
            eps,
            kappa_max: S::of(0.98),
            dropout_input: S::zero(),
            dropout_layer: S::zero(),
            params,
        })
    }

    /// Sets the training-time drop rates.
    pub fn with_dropout(mut self, input: S, layer: S) -> Result<Self> {
        for rate in [input, layer] {
            if !(rate >= S::zero() && rate < S::one()) {
                return Err(Error::Contract("dropout rates must lie in [0, 1)".into()));
            }
        }
        self.dropout_input = input;
        self.dropout_layer = layer;
        Ok(self)
    }

    /// Registers every parameter on the tape, in stable order.
    pub fn bind(&self, tape: &mut Tape<S>) -> TapeBinding {
        let mut map = BTreeMap::new();
        for (name, value) in self.params.iter() {
            map.insert(name.to_string(), tape.param(value.clone()));
        }
        TapeBinding { map }
    }
}

/// Name → tape node for one bound forward pass.
#[derive(Clone, Debug)]
pub struct TapeBinding {
    map: BTreeMap<String, ValueRef>,
}

impl TapeBinding {
    pub fn get(&self, name: &str) -> ValueRef {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueRef)> {
        self.map.iter().map(|(n, r)| (n.as_str(), *r))
    }
}

/// Frozen randomness for one forward pass: per layer, a Gaussian matrix for
/// the coordinate families and per-incidence noise skews (C⁻¹ of a uniform
/// rotation) for the rotation family, plus training-time dropout masks.
#[derive(Clone, Debug)]
pub struct NoiseBundle<S> {
    pub gauss: Vec<Matrix<S>>,
    pub skews: Vec<Vec<Matrix<S>>>,
    pub input_mask: Option<Matrix<S>>,
    pub layer_masks: Vec<Option<Matrix<S>>>,
}

fn dropout_mask<S, R>(rows: usize, cols: usize, rate: S, rng: &mut R) -> Matrix<S>
where
    S: Real,
    R: Rng + ?Sized,
{
    let keep = (S::one() - rate).to_f64c();
    let inv = S::of(1.0 / keep);
    Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < keep { inv } else { S::zero() })
}

/// Draws the bundle for one forward pass of `model` on `graph`; dropout
/// masks are drawn only when `train` is set.
pub fn draw_noise<S, R>(
    model: &SheafModel<S>,
    graph: &Graph<S>,
    train: bool,
    rng: &mut R,
) -> Result<NoiseBundle<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    let inc = 2 * graph.num_edges();
    let d = model.spec.stalk_dim;
    let layers = model.spec.layers;
    let mut bundle = NoiseBundle {
        gauss: Vec::new(),
        skews: Vec::new(),
        input_mask: None,
        layer_masks: vec![None; layers],
    };
    match model.family {
        Family::Identity => {}
        Family::Diagonal | Family::General => {
            let dim = if model.family == Family::Diagonal { d } else { d * d };
            for _ in 0..layers {
                bundle
                    .gauss
                    .push(Matrix::from_fn(inc, dim, |_, _| rng.sample(StandardNormal)));
            }
        }
        Family::SpecialOrthogonal => {
            for _ in 0..layers {
                let mut layer = Vec::with_capacity(inc);
                for _ in 0..inc {
                    layer.push(draw_noise_skew(d, rng)?);
                }
                bundle.skews.push(layer);
            }
        }
    }
    if train {
        let n = graph.num_nodes();
        if model.dropout_input > S::zero() {
            bundle.input_mask =
                Some(dropout_mask(n, graph.num_features(), model.dropout_input, rng));
        }
        if model.dropout_layer > S::zero() {
            for t in 0..layers {
                bundle.layer_masks[t] =
                    Some(dropout_mask(n * d, model.spec.channels, model.dropout_layer, rng));
            }
        }
    }
    Ok(bundle)
}

/// C⁻¹ of a Haar-uniform rotation, redrawn (bounded) off the Cayley cut.
fn draw_noise_skew<S, R>(d: usize, rng: &mut R) -> Result<Matrix<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    for _ in 0..8 {
        let x = rotations::sample_uniform_so(d, rng)?;
        match rotations::cayley_inverse(&x) {
            Ok(b) => return Ok(b),
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NonConvergence("uniform draw hit the Cayley cut 8 times in a row".into()))
}

/// Scalar exponential linear unit.
pub fn elu<S: Real>(x: S) -> S {
    if x >= S::zero() {
        x
    } else {
        x.exp() - S::one()
    }
}

/// Affine+ELU composition over `layers` of (weight, bias) nodes.
pub fn mlp_forward<S: Real>(
    tape: &mut Tape<S>,
    layers: &[(ValueRef, ValueRef)],
    x: ValueRef,
) -> Result<ValueRef> {
    let mut cur = x;
    for &(w, b) in layers {
        if tape.value(cur).cols() != tape.value(w).cols() {
            return Err(Error::Contract(format!(
                "layer expects {} inputs, got {}",
                tape.value(w).cols(),
                tape.value(cur).cols()
            )));
        }
        let aff = tape.affine(cur, w, b);
        cur = tape.elu(aff);
    }
    Ok(cur)
}

/// One sheaf convolution layer X − σ(Δ (I_n⊗W1) X W2), with Δ given as
/// block nodes; (I⊗W1) is applied blockwise, never materialized.
pub fn sheaf_conv_layer<S: Real>(
    tape: &mut Tape<S>,
    x: ValueRef,
    delta_blocks: &[(usize, usize, ValueRef)],
    w1: ValueRef,
    w2: ValueRef,
    n: usize,
    d: usize,
    activation: Activation,
) -> ValueRef {
    let wx = tape.block_lmul(w1, x, n, d);
    let awx = tape.block_apply(delta_blocks.to_vec(), wx, n, d);
    let awxw = tape.matmul(awx, w2);
    let update = match activation {
        Activation::Elu => tape.elu(awxw),
        Activation::Identity => awxw,
    };
    tape.sub(x, update)
}

/// Tape-level posterior: batched coordinates for the Gaussian families, or
/// per-incidence mean rotations plus a concentration column for SO(d).
#[derive(Clone, Debug)]
pub struct TapePosterior {
    pub family: Family,
    /// 2|E|×dim means (Gaussian families).
    pub mu: Option<ValueRef>,
    /// 2|E|×dim positive scales (Gaussian families).
    pub sigma: Option<ValueRef>,
    /// 2|E| mean rotations (SO family).
    pub means: Vec<ValueRef>,
    /// 2|E|×1 concentrations in [0, κ_max] (SO family).
    pub kappa: Option<ValueRef>,
}

/// Runs the learner MLP over per-incidence concatenated rows of the resized
/// features and squashes raw outputs into posterior parameters.
pub fn sheaf_learner<S: Real>(
    tape: &mut Tape<S>,
    binding: &TapeBinding,
    graph: &Graph<S>,
    x_resized: ValueRef,
    family: Family,
    d: usize,
    kappa_max: S,
    hidden_layers: usize,
) -> Result<TapePosterior> {
    assert!(family != Family::Identity, "the identity ablation has no learner");
    let h = tape.gather_pairs(x_resized, graph.edges().to_vec());
    let mut cur = h;
    for l in 0..hidden_layers {
        let aff = tape.affine(cur, binding.get(&format!("sheaf.mlp.{l}.w")), binding.get(&format!("sheaf.mlp.{l}.b")));
        cur = tape.elu(aff);
    }
    let raw = tape.affine(
        cur,
        binding.get(&format!("sheaf.mlp.{hidden_layers}.w")),
        binding.get(&format!("sheaf.mlp.{hidden_layers}.b")),
    );

    match family {
        Family::Diagonal | Family::General => {
            let dim = if family == Family::Diagonal { d } else { d * d };
            let mu = tape.cols(raw, 0, dim);
            let sigma_raw = tape.cols(raw, dim, 2 * dim);
            let sigma = tape.softplus(sigma_raw);
            Ok(TapePosterior { family, mu: Some(mu), sigma: Some(sigma), means: vec![], kappa: None })
        }
        Family::SpecialOrthogonal => {
            let dd2 = d * (d - 1) / 2;
            let inc = 2 * graph.num_edges();
            let kappa_raw = tape.cols(raw, dd2, dd2 + 1);
            let kappa_unit = tape.logistic(kappa_raw);
            let kappa = tape.scale(kappa_unit, kappa_max);
            let mut means = Vec::with_capacity(inc);
            if dd2 > 0 {
                let phi = tape.cols(raw, 0, dd2);
                for i in 0..inc {
                    let row = tape.row(phi, i);
                    let skew = tape.skew_from_coords(row, d)?;
                    means.push(tape.cayley(skew)?);
                }
            } else {
                for _ in 0..inc {
                    means.push(tape.constant(Matrix::identity(d)));
                }
            }
            Ok(TapePosterior { family, mu: None, sigma: None, means, kappa: Some(kappa) })
        }
        Family::Identity => unreachable!(),
    }
}

/// Closed-form KL of the posterior from its prior, on the tape.
/// `None` when no closed form exists (SO(d), d ≥ 4).
pub fn kl_closed_on_tape<S: Real>(
    tape: &mut Tape<S>,
    posterior: &TapePosterior,
    d: usize,
) -> Option<ValueRef> {
    match posterior.family {
        Family::Identity => None,
        Family::Diagonal | Family::General => {
            // −½ Σ (1 + ln σ² − μ² − σ²).
            let mu = posterior.mu.expect("gaussian posterior");
            let sigma = posterior.sigma.expect("gaussian posterior");
            let s2 = tape.square(sigma);
            let ln_s2 = tape.ln(s2);
            let mu2 = tape.square(mu);
            let t1 = tape.affine_const(ln_s2, S::one(), S::one());
            let t2 = tape.sub(t1, mu2);
            let t3 = tape.sub(t2, s2);
            let total = tape.sum(t3);
            Some(tape.scale(total, S::of(-0.5)))
        }
        Family::SpecialOrthogonal => {
            let kappa = posterior.kappa.expect("rotation posterior");
            match d {
                // Σ −ln(1−κ²)
                2 => {
                    let k2 = tape.square(kappa);
                    let arg = tape.affine_const(k2, -S::one(), S::one());
                    let l = tape.ln(arg);
                    let total = tape.sum(l);
                    Some(tape.scale(total, -S::one()))
                }
                // Σ −ln(1−κ²) − 2ln(1−κ) − 2κ
                3 => {
                    let k2 = tape.square(kappa);
                    let arg1 = tape.affine_const(k2, -S::one(), S::one());
                    let l1 = tape.ln(arg1);
                    let arg2 = tape.affine_const(kappa, -S::one(), S::one());
                    let l2 = tape.ln(arg2);
                    let a = tape.scale(l1, -S::one());
                    let b = tape.scale(l2, S::of(-2.0));
                    let c = tape.scale(kappa, S::of(-2.0));
                    let ab = tape.add(a, b);
                    let abc = tape.add(ab, c);
                    Some(tape.sum(abc))
                }
                _ => None,
            }
        }
    }
}

/// Per-incidence restriction-map samples for one layer, as tape nodes.
fn sample_layer_maps<S: Real>(
    tape: &mut Tape<S>,
    posterior: &TapePosterior,
    noise: &NoiseBundle<S>,
    layer: usize,
    d: usize,
    inc: usize,
) -> Result<Vec<ValueRef>> {
    let mut maps = Vec::with_capacity(inc);
    match posterior.family {
        Family::Diagonal | Family::General => {
            let eps = tape.constant(noise.gauss[layer].clone());
            let sigma = posterior.sigma.expect("gaussian posterior");
            let mu = posterior.mu.expect("gaussian posterior");
            let scaled = tape.hadamard(sigma, eps);
            let z = tape.add(mu, scaled);
            for i in 0..inc {
                let row = tape.row(z, i);
                let f = if posterior.family == Family::Diagonal {
                    tape.diag_from_vec(row)
                } else {
                    tape.reshape(row, d, d)
                };
                maps.push(f);
            }
        }
        Family::SpecialOrthogonal => {
            let kappa = posterior.kappa.expect("rotation posterior");
            // shrink s = (1−κ)/(1+κ), per incidence.
            let num = tape.affine_const(kappa, -S::one(), S::one());
            let den = tape.affine_const(kappa, S::one(), S::one());
            let den_inv = tape.recip(den);
            let shrink = tape.hadamard(num, den_inv);
            for i in 0..inc {
                let s_i = tape.row(shrink, i);
                let b = tape.constant(noise.skews[layer][i].clone());
                let sb = tape.scale_by_scalar(b, s_i);
                let y = tape.cayley(sb)?;
                maps.push(tape.matmul(y, posterior.means[i]));
            }
        }
        Family::Identity => unreachable!("identity family draws no samples"),
    }
    Ok(maps)
}

/// Normalized-Laplacian blocks of the sampled sheaf, on the tape.
fn laplacian_blocks<S: Real>(
    tape: &mut Tape<S>,
    graph: &Graph<S>,
    maps: &[ValueRef],
    eps: S,
) -> Result<Vec<(usize, usize, ValueRef)>> {
    let n = graph.num_nodes();
    // Degree block S_u = Σ over incidences FᵀF.
    let mut gram_terms: Vec<Vec<ValueRef>> = vec![Vec::new(); n];
    let mut trans: Vec<ValueRef> = Vec::with_capacity(maps.len());
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        for (side, node) in [(2 * e, u), (2 * e + 1, v)] {
            let ft = tape.transpose(maps[side]);
            trans.push(ft);
            let gram = tape.matmul(ft, maps[side]);
            gram_terms[node].push(gram);
        }
    }
    let mut r_nodes: Vec<Option<ValueRef>> = vec![None; n];
    let mut s_nodes: Vec<Option<ValueRef>> = vec![None; n];
    for u in 0..n {
        if gram_terms[u].is_empty() {
            continue;
        }
        let s = tape.add_n(gram_terms[u].clone());
        s_nodes[u] = Some(s);
        r_nodes[u] = Some(tape.inv_sqrt_psd(s, eps)?);
    }

    let mut blocks = Vec::new();
    for u in 0..n {
        if let (Some(r), Some(s)) = (r_nodes[u], s_nodes[u]) {
            let rs = tape.matmul(r, s);
            blocks.push((u, u, tape.matmul(rs, r)));
        }
    }
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        let fu_t = trans[2 * e];
        let luv = tape.matmul(fu_t, maps[2 * e + 1]);
        let luv = tape.scale(luv, -S::one());
        let (ru, rv) = (r_nodes[u].expect("incident"), r_nodes[v].expect("incident"));
        let r_luv = tape.matmul(ru, luv);
        let duv = tape.matmul(r_luv, rv);
        blocks.push((u, v, duv));
        blocks.push((v, u, tape.transpose(duv)));
    }
    Ok(blocks)
}

/// Constant normalized-Laplacian blocks for the frozen identity sheaf.
fn identity_delta_blocks<S: Real>(
    tape: &mut Tape<S>,
    graph: &Graph<S>,
    d: usize,
) -> Vec<(usize, usize, ValueRef)> {
    let n = graph.num_nodes();
    let deg: Vec<usize> = (0..n).map(|u| graph.degree(u)).collect();
    let mut blocks = Vec::new();
    for u in 0..n {
        if deg[u] > 0 {
            blocks.push((u, u, tape.constant(Matrix::identity(d))));
        }
    }
    for &(u, v) in graph.edges() {
        let w = -S::one() / S::of((deg[u] * deg[v]) as f64).sqrt();
        let b = tape.constant(Matrix::identity(d).scale(w));
        blocks.push((u, v, b));
        blocks.push((v, u, b));
    }
    blocks
}

/// KL term of one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum KlTerm {
    /// Exact closed form on the tape.
    Closed(ValueRef),
    /// Single-sample log q − log p estimate (uniform prior: log p ≡ 0),
    /// averaged over the per-layer samples.
    MonteCarlo(ValueRef),
    /// Identity ablation: no KL.
    Absent,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: ValueRef,
    pub kl: KlTerm,
    pub posterior: Option<TapePosterior>,
}

/// One full forward pass with the given frozen noise.
pub fn forward<S: Real>(
    model: &SheafModel<S>,
    tape: &mut Tape<S>,
    binding: &TapeBinding,
    graph: &Graph<S>,
    noise: &NoiseBundle<S>,
) -> Result<ForwardOutput> {
    if graph.num_features() != model.in_features {
        return Err(Error::Contract(format!(
            "model expects {} input features, graph has {}",
            model.in_features,
            graph.num_features()
        )));
    }
    if graph.num_classes() != model.num_classes {
        return Err(Error::Contract(format!(
            "model expects {} classes, graph has {}",
            model.num_classes,
            graph.num_classes()
        )));
    }
    let n = graph.num_nodes();
    let d = model.spec.stalk_dim;
    let f = model.spec.channels;
    let inc = 2 * graph.num_edges();
    let mut x_in = tape.constant(graph.features().clone());
    if let Some(mask) = &noise.input_mask {
        let m = tape.constant(mask.clone());
        x_in = tape.hadamard(x_in, m);
    }

    // Learner path.
    let posterior = if model.family == Family::Identity {
        None
    } else {
        let resized = tape.affine(x_in, binding.get("sheaf.resize.w"), binding.get("sheaf.resize.b"));
        Some(sheaf_learner(
            tape,
            binding,
            graph,
            resized,
            model.family,
            d,
            model.kappa_max,
            model.spec.hidden.len(),
        )?)
    };

    // Feature path to the (n·d)×f stack.
    let z0 = tape.affine(x_in, binding.get("feat.0.w"), binding.get("feat.0.b"));
    let z1 = tape.elu(z0);
    let z2 = tape.affine(z1, binding.get("feat.1.w"), binding.get("feat.1.b"));
    let mut x = tape.reshape(z2, n * d, f);

    // Diffusion layers, one fresh sheaf sample each.
    let mut mc_terms: Vec<ValueRef> = Vec::new();
    for t in 0..model.spec.layers {
        let blocks = match &posterior {
            None => identity_delta_blocks(tape, graph, d),
            Some(p) => {
                let maps = sample_layer_maps(tape, p, noise, t, d, inc)?;
                if needs_mc_kl(model.family, d) {
                    mc_terms.push(log_q_rotation_samples(tape, p, &maps, d)?);
                }
                laplacian_blocks(tape, graph, &maps, model.eps)?
            }
        };
        x = sheaf_conv_layer(
            tape,
            x,
            &blocks,
            binding.get(&format!("conv.{t}.w1")),
            binding.get(&format!("conv.{t}.w2")),
            n,
            d,
            model.spec.activation,
        );
        if let Some(mask) = &noise.layer_masks[t] {
            let m = tape.constant(mask.clone());
            x = tape.hadamard(x, m);
        }
    }

    let rows = tape.reshape(x, n, d * f);
    let logits = tape.affine(rows, binding.get("read.w"), binding.get("read.b"));

    let kl = match &posterior {
        None => KlTerm::Absent,
        Some(p) => match kl_closed_on_tape(tape, p, d) {
            Some(r) => KlTerm::Closed(r),
            None => {
                let total = tape.add_n(mc_terms.clone());
                let avg = tape.scale(total, S::one() / S::of(model.spec.layers as f64));
                KlTerm::MonteCarlo(avg)
            }
        },
    };
    Ok(ForwardOutput { logits, kl, posterior })
}

fn needs_mc_kl(family: Family, d: usize) -> bool {
    family == Family::SpecialOrthogonal && d >= 4
}

/// Σ over incidences of log q(F_i; M_i, κ_i) for one layer's samples, used
/// by the sampled KL when no closed form exists.
fn log_q_rotation_samples<S: Real>(
    tape: &mut Tape<S>,
    posterior: &TapePosterior,
    maps: &[ValueRef],
    d: usize,
) -> Result<ValueRef> {
    let kappa = posterior.kappa.expect("rotation posterior");
    // Batched front factor: (d(d−1)/2)·ln(1−κ²) summed over incidences.
    let k2 = tape.square(kappa);
    let arg = tape.affine_const(k2, -S::one(), S::one());
    let lnarg = tape.ln(arg);
    let front_sum = tape.sum(lnarg);
    let front = tape.scale(front_sum, S::of((d * (d - 1) / 2) as f64));
    let mut terms = vec![front];
    for (i, &f_i) in maps.iter().enumerate() {
        let mt = tape.transpose(posterior.means[i]);
        let fmt = tape.matmul(f_i, mt);
        let k_i = tape.row(kappa, i);
        let z = tape.sub_scaled_identity(fmt, k_i);
        let ld = tape.log_det(z)?;
        terms.push(tape.scale(ld, S::one() - S::of(d as f64)));
    }
    Ok(tape.add_n(terms))
}

/// Reverse sweep from `loss`, then one gradient matrix per parameter
/// (zeros where a parameter never reached the loss).
pub fn compute_gradients<S: Real>(
    tape: &mut Tape<S>,
    loss: ValueRef,
    binding: &TapeBinding,
) -> BTreeMap<String, Matrix<S>> {
    tape.backward(loss);
    binding
        .iter()
        .map(|(name, r)| (name.to_string(), tape.grad(r).clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sheaf::{degree_blocks, normalized_laplacian, sheaf_laplacian, CellularSheaf};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    type M = Matrix<f64>;

    fn toy_graph() -> Arc<Graph<f64>> {
        let feats = M::from_fn(4, 3, |r, c| 0.1 * (r as f64 + 1.0) * (c as f64 + 1.0) - 0.2);
        Arc::new(
            Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)], feats, vec![0, 0, 1, 1], 2)
                .unwrap(),
        )
    }

    #[test]
    fn elu_examples() {
        assert_eq!(elu(0.0f64), 0.0);
        assert_eq!(elu(1.0f64), 1.0);
        assert!((elu(-1.0f64) - (-0.6321205588285577)).abs() < 1e-12);
        assert!((elu(-40.0f64) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn mlp_forward_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(M::from_vec(1, 1, vec![0.5]));
        let w = tape.param(M::from_vec(1, 1, vec![2.0]));
        let b = tape.param(M::from_vec(1, 1, vec![1.0]));
        let out = mlp_forward(&mut tape, &[(w, b)], x).unwrap();
        assert_eq!(tape.scalar_value(out), 2.0);

        let mut tape = Tape::new();
        let x = tape.constant(M::from_vec(1, 2, vec![0.3, 0.8]));
        let w = tape.param(M::zeros(2, 2));
        let b = tape.param(M::zeros(1, 2));
        let out = mlp_forward(&mut tape, &[(w, b)], x).unwrap();
        assert_eq!(tape.value(out), &M::zeros(1, 2));

        let mut tape = Tape::new();
        let x = tape.constant(M::from_vec(1, 2, vec![0.3, 0.8]));
        let w = tape.param(M::identity(2));
        let b = tape.param(M::zeros(1, 2));
        let out = mlp_forward(&mut tape, &[(w, b)], x).unwrap();
        assert_eq!(tape.value(out), &M::from_vec(1, 2, vec![0.3, 0.8]));

        let mut tape = Tape::new();
        let x = tape.constant(M::zeros(1, 3));
        let w = tape.param(M::zeros(2, 2));
        let b = tape.param(M::zeros(1, 2));
        assert!(mlp_forward(&mut tape, &[(w, b)], x).is_err());
    }

    #[test]
    fn conv_layer_reduces_to_diffusion_step() {
        let graph = toy_graph();
        let sheaf = CellularSheaf::identity(graph.clone(), 2).unwrap();
        let l = sheaf_laplacian(&sheaf);
        let delta = normalized_laplacian(&l, &degree_blocks(&l), 0.0).unwrap();

        let mut tape = Tape::new();
        let x0 = M::from_fn(8, 3, |r, c| (r as f64 - 3.0) * 0.2 + c as f64 * 0.1);
        let x = tape.constant(x0.clone());
        let blocks: Vec<(usize, usize, ValueRef)> = delta
            .blocks()
            .map(|(&(i, j), b)| (i, j, tape.constant(b.clone())))
            .collect();
        let w1 = tape.constant(M::identity(2));
        let w2 = tape.constant(M::identity(3));
        let out = sheaf_conv_layer(&mut tape, x, &blocks, w1, w2, 4, 2, Activation::Identity);

        let fx = crate::diffusion::FeatureMatrix::new(4, 2, x0).unwrap();
        let want = crate::diffusion::diffusion_step(&fx, &delta, 1.0);
        assert!(tape.value(out).sub(want.values()).max_abs() < 1e-12);
    }

    #[test]
    fn conv_layer_hand_case() {
        // Single edge, d=1, identity sheaf, W1=W2=1: X − elu(Δ X).
        let mut tape = Tape::new();
        let x = tape.constant(M::from_rows(&[vec![1.0], vec![0.0]]));
        let b00 = tape.constant(M::from_vec(1, 1, vec![1.0]));
        let b11 = tape.constant(M::from_vec(1, 1, vec![1.0]));
        let b01 = tape.constant(M::from_vec(1, 1, vec![-1.0]));
        let b10 = tape.constant(M::from_vec(1, 1, vec![-1.0]));
        let blocks = vec![(0, 0, b00), (1, 1, b11), (0, 1, b01), (1, 0, b10)];
        let w1 = tape.constant(M::identity(1));
        let w2 = tape.constant(M::identity(1));
        let out = sheaf_conv_layer(&mut tape, x, &blocks, w1, w2, 2, 1, Activation::Elu);
        // X = (1,0): ΔX = (1,−1); X − elu(ΔX) = (0, 0.632121).
        let expect = M::from_rows(&[vec![0.0], vec![0.6321205588285577]]);
        assert!(tape.value(out).sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn zero_learner_weights_give_documented_posterior() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(70);
        for family in [Family::Diagonal, Family::SpecialOrthogonal, Family::General] {
            let spec = LayerSpec::new(2, 2, 2).unwrap();
            let model = SheafModel::init(family, spec, 3, 2, 1e-8, &mut rng).unwrap();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let noise = draw_noise(&model, &graph, false, &mut rng).unwrap();
            let out = forward(&model, &mut tape, &binding, &graph, &noise).unwrap();
            let p = out.posterior.unwrap();
            match family {
                Family::Diagonal | Family::General => {
                    assert!(tape.value(p.mu.unwrap()).max_abs() == 0.0);
                    let sig = tape.value(p.sigma.unwrap());
                    let want = 2f64.ln();
                    for &s in sig.data() {
                        assert!((s - want).abs() < 1e-12);
                    }
                }
                Family::SpecialOrthogonal => {
                    for &m in &p.means {
                        assert!(tape.value(m).sub(&M::identity(2)).max_abs() < 1e-12);
                    }
                    let kap = tape.value(p.kappa.unwrap());
                    for &k in kap.data() {
                        assert!((k - 0.49).abs() < 1e-12);
                    }
                }
                Family::Identity => unreachable!(),
            }
            // One parameter pair per incidence.
            assert_eq!(2 * graph.num_edges(), 8);
        }
    }

    #[test]
    fn forward_shapes_across_grid() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        for family in [Family::Diagonal, Family::SpecialOrthogonal, Family::General, Family::Identity] {
            for (layers, d, f) in [(1, 1, 1), (2, 2, 2), (3, 2, 4), (2, 3, 2)] {
                if family == Family::SpecialOrthogonal && d < 2 {
                    continue;
                }
                let spec = LayerSpec::new(layers, d, f).unwrap();
                let model = SheafModel::init(family, spec, 3, 2, 1e-8, &mut rng).unwrap();
                let mut tape = Tape::new();
                let binding = model.bind(&mut tape);
                let noise = draw_noise(&model, &graph, false, &mut rng).unwrap();
                let out = forward(&model, &mut tape, &binding, &graph, &noise).unwrap();
                let lg = tape.value(out.logits);
                assert_eq!((lg.rows(), lg.cols()), (4, 2));
                assert!(lg.all_finite());
            }
        }
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let graph = toy_graph();
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(72);
            let spec = LayerSpec::new(2, 2, 2).unwrap();
            let model =
                SheafModel::init(Family::SpecialOrthogonal, spec, 3, 2, 1e-8, &mut rng).unwrap();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let noise = draw_noise(&model, &graph, false, &mut rng).unwrap();
            let out = forward(&model, &mut tape, &binding, &graph, &noise).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dropout_masks_only_drawn_in_train_mode() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(74);
        let spec = LayerSpec::new(2, 2, 2).unwrap();
        let model = SheafModel::init(Family::Diagonal, spec, 3, 2, 1e-8, &mut rng)
            .unwrap()
            .with_dropout(0.5, 0.25)
            .unwrap();

        let eval = draw_noise(&model, &graph, false, &mut rng).unwrap();
        assert!(eval.input_mask.is_none());
        assert!(eval.layer_masks.iter().all(|m| m.is_none()));

        let train = draw_noise(&model, &graph, true, &mut rng).unwrap();
        let input = train.input_mask.as_ref().unwrap();
        assert_eq!((input.rows(), input.cols()), (4, 3));
        // Inverted scaling: entries are 0 or 1/keep.
        for &v in input.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
        assert_eq!(train.layer_masks.len(), 2);
        for mask in &train.layer_masks {
            let m = mask.as_ref().unwrap();
            assert_eq!((m.rows(), m.cols()), (8, 2));
            for &v in m.data() {
                assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
            }
        }

        // Forward under train noise still yields finite logits.
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let out = forward(&model, &mut tape, &binding, &graph, &train).unwrap();
        assert!(tape.value(out.logits).all_finite());

        // Rates of zero never produce masks, train or not.
        let plain = SheafModel::init(Family::Diagonal, LayerSpec::new(2, 2, 2).unwrap(), 3, 2, 1e-8, &mut rng).unwrap();
        let noise = draw_noise(&plain, &graph, true, &mut rng).unwrap();
        assert!(noise.input_mask.is_none());
        assert!(noise.layer_masks.iter().all(|m| m.is_none()));

        assert!(plain.clone().with_dropout(1.0, 0.0).is_err());
        assert!(plain.clone().with_dropout(0.0, -0.1).is_err());
    }

    #[test]
    fn gradient_map_covers_every_parameter() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        let spec = LayerSpec::new(2, 2, 2).unwrap();
        let model = SheafModel::init(Family::General, spec, 3, 2, 1e-8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let noise = draw_noise(&model, &graph, false, &mut rng).unwrap();
        let out = forward(&model, &mut tape, &binding, &graph, &noise).unwrap();
        let nll = tape.masked_nll(out.logits, graph.labels(), &[0, 1, 2, 3]);
        let kl = match out.kl {
            KlTerm::Closed(r) => r,
            _ => unreachable!(),
        };
        let kl_scaled = tape.scale(kl, 0.1);
        let loss = tape.add(nll, kl_scaled);
        let grads = compute_gradients(&mut tape, loss, &binding);
        assert_eq!(grads.len(), model.params.len());
        // Both groups receive signal.
        assert!(grads["sheaf.mlp.1.w"].max_abs() > 0.0);
        assert!(grads["read.w"].max_abs() > 0.0);
        assert!(grads["conv.0.w1"].max_abs() > 0.0);
    }
}

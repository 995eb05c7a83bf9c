//! Ensemble prediction and uncertainty metrics: predictive entropy,
//! epistemic variance, mutual information, and expected calibration error.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::model::{draw_noise, forward, SheafModel};
use crate::nn::tape::Tape;
use crate::scalar::Real;
use crate::sheaf::Graph;

/// T stochastic forward passes aggregated into a predictive distribution.
#[derive(Clone, Debug)]
pub struct EnsemblePrediction<S> {
    /// One n×C probability matrix per pass.
    pub probs: Vec<Matrix<S>>,
    /// Arithmetic mean over passes, n×C.
    pub mean_probs: Matrix<S>,
    /// argmax of mean_probs per node; ties break to the lowest class id.
    pub predicted: Vec<usize>,
    /// max of mean_probs per node.
    pub confidence: Vec<S>,
}

impl<S: Real> EnsemblePrediction<S> {
    /// Aggregates per-pass probability matrices, validating that every row
    /// is a probability vector.
    pub fn from_probs(probs: Vec<Matrix<S>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("need at least one forward pass".into()));
        }
        let (n, c) = (probs[0].rows(), probs[0].cols());
        let tol = S::of(1e-9);
        for (t, p) in probs.iter().enumerate() {
            if p.rows() != n || p.cols() != c {
                return Err(Error::Contract(format!("pass {t}: inconsistent shape")));
            }
            for i in 0..n {
                let row_sum: S = p.row(i).iter().copied().sum();
                if (row_sum - S::one()).abs() > tol || p.row(i).iter().any(|&v| v < S::zero()) {
                    return Err(Error::Contract(format!(
                        "pass {t}, node {i}: row is not a probability vector"
                    )));
                }
            }
        }
        let t_count = S::of(probs.len() as f64);
        let mut mean_probs = Matrix::zeros(n, c);
        for p in &probs {
            mean_probs = mean_probs.add(p);
        }
        let mean_probs = mean_probs.scale(S::one() / t_count);
        let mut predicted = Vec::with_capacity(n);
        let mut confidence = Vec::with_capacity(n);
        for i in 0..n {
            let row = mean_probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            predicted.push(best);
            confidence.push(row[best]);
        }
        Ok(EnsemblePrediction { probs, mean_probs, predicted, confidence })
    }

    pub fn passes(&self) -> usize {
        self.probs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.mean_probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.mean_probs.cols()
    }

    /// The T per-pass probability vectors of one node, T×C.
    pub fn node_stack(&self, node: usize) -> Matrix<S> {
        Matrix::from_fn(self.probs.len(), self.num_classes(), |t, c| self.probs[t][(node, c)])
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows<S: Real>(logits: &Matrix<S>) -> Matrix<S> {
    let (n, c) = (logits.rows(), logits.cols());
    Matrix::from_fn(n, c, |i, j| {
        let row = logits.row(i);
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let denom: S = row.iter().map(|&v| (v - mx).exp()).sum();
        (logits[(i, j)] - mx).exp() / denom
    })
}

/// Runs T forward passes with freshly sampled sheaves and aggregates them.
pub fn ensemble_predict<S, R>(
    model: &SheafModel<S>,
    graph: &Graph<S>,
    passes: usize,
    rng: &mut R,
) -> Result<EnsemblePrediction<S>>
where
    S: Real,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    if passes == 0 {
        return Err(Error::Contract("need at least one forward pass".into()));
    }
    let mut probs = Vec::with_capacity(passes);
    for _ in 0..passes {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let noise = draw_noise(model, graph, false, rng)?;
        let out = forward(model, &mut tape, &binding, graph, &noise)?;
        probs.push(softmax_rows(tape.value(out.logits)));
    }
    EnsemblePrediction::from_probs(probs)
}

/// −Σ_c p log p with 0·log 0 := 0; lies in [0, log C].
pub fn predictive_entropy<S: Real>(probs: &[S]) -> S {
    let mut h = S::zero();
    for &p in probs {
        if p > S::zero() {
            h -= p * p.ln();
        }
    }
    h
}

/// Mean over classes of the population variance across passes; the stack is
/// T×C (one row per pass).
pub fn epistemic_variance<S: Real>(stack: &Matrix<S>) -> S {
    let (t, c) = (stack.rows(), stack.cols());
    assert!(t >= 1, "need at least one pass");
    let tn = S::of(t as f64);
    let mut total = S::zero();
    for j in 0..c {
        let mean: S = (0..t).map(|i| stack[(i, j)]).sum::<S>() / tn;
        let var: S = (0..t)
            .map(|i| {
                let d = stack[(i, j)] - mean;
                d * d
            })
            .sum::<S>()
            / tn;
        total += var;
    }
    total / S::of(c as f64)
}

/// H[p̄] − (1/T) Σ_t H[p_t], clamped at 0 against float noise.
pub fn mutual_information<S: Real>(stack: &Matrix<S>) -> S {
    let (t, c) = (stack.rows(), stack.cols());
    assert!(t >= 1, "need at least one pass");
    let tn = S::of(t as f64);
    let mean: Vec<S> = (0..c)
        .map(|j| (0..t).map(|i| stack[(i, j)]).sum::<S>() / tn)
        .collect();
    let h_mean = predictive_entropy(&mean);
    let mean_h: S = (0..t).map(|i| predictive_entropy(stack.row(i))).sum::<S>() / tn;
    (h_mean - mean_h).max(S::zero())
}

/// Per-bin calibration statistics over M equal confidence intervals.
#[derive(Clone, Debug)]
pub struct CalibrationBins<S> {
    pub count: Vec<usize>,
    pub accuracy: Vec<S>,
    pub mean_confidence: Vec<S>,
}

impl<S> CalibrationBins<S> {
    pub fn num_bins(&self) -> usize {
        self.count.len()
    }
}

/// Σ_m (|B_m|/N)·|acc(B_m) − conf(B_m)| over M equal-width confidence bins
/// (the top bin closed at 1); empty bins contribute 0.
pub fn expected_calibration_error<S: Real>(
    confidence: &[S],
    predicted: &[usize],
    labels: &[usize],
    num_bins: usize,
) -> (S, CalibrationBins<S>) {
    assert!(num_bins >= 1, "need at least one bin");
    assert_eq!(confidence.len(), predicted.len());
    assert_eq!(confidence.len(), labels.len());
    let mut count = vec![0usize; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut conf_sum = vec![S::zero(); num_bins];
    let m = S::of(num_bins as f64);
    for i in 0..confidence.len() {
        let idx = (confidence[i] * m).to_f64c().floor() as usize;
        let idx = idx.min(num_bins - 1);
        count[idx] += 1;
        conf_sum[idx] += confidence[i];
        if predicted[i] == labels[i] {
            hits[idx] += 1;
        }
    }
    let n = confidence.len();
    let mut ece = S::zero();
    let mut accuracy = vec![S::zero(); num_bins];
    let mut mean_confidence = vec![S::zero(); num_bins];
    for b in 0..num_bins {
        if count[b] == 0 {
            continue;
        }
        let cb = S::of(count[b] as f64);
        accuracy[b] = S::of(hits[b] as f64) / cb;
        mean_confidence[b] = conf_sum[b] / cb;
        ece += cb / S::of(n as f64) * (accuracy[b] - mean_confidence[b]).abs();
    }
    (ece, CalibrationBins { count, accuracy, mean_confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Family, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    type M = Matrix<f64>;

    fn toy_graph() -> Arc<Graph<f64>> {
        let feats = M::from_fn(4, 3, |r, c| 0.15 * (r as f64 + 1.0) - 0.1 * c as f64);
        Arc::new(
            Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)], feats, vec![0, 0, 1, 1], 2)
                .unwrap(),
        )
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(predictive_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let c = 5;
        let u = vec![1.0 / c as f64; c];
        assert!((predictive_entropy(&u) - (c as f64).ln()).abs() < 1e-12);
        assert!((predictive_entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn epistemic_variance_examples() {
        // Dyadic entries keep the pass-mean exact, so the zero is exact.
        let same = M::from_rows(&[vec![0.25, 0.75], vec![0.25, 0.75], vec![0.25, 0.75]]);
        assert_eq!(epistemic_variance(&same), 0.0);
        let anti = M::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((epistemic_variance(&anti) - 0.25).abs() < 1e-15);
        let single = M::from_rows(&[vec![0.9, 0.1]]);
        assert_eq!(epistemic_variance(&single), 0.0);
    }

    #[test]
    fn mutual_information_examples() {
        let same = M::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert_eq!(mutual_information(&same), 0.0);
        let anti = M::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((mutual_information(&anti) - 2f64.ln()).abs() < 1e-12);
        // MI never exceeds the mean-distribution entropy.
        let mixed = M::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6], vec![0.2, 0.8]]);
        let mean = [0.5, 0.5];
        assert!(mutual_information(&mixed) <= predictive_entropy(&mean));
        assert!(mutual_information(&mixed) >= 0.0);
    }

    #[test]
    fn ece_examples() {
        let (ece, bins) = expected_calibration_error(&[1.0f64, 1.0], &[0, 1], &[0, 1], 10);
        assert_eq!(ece, 0.0);
        assert_eq!(bins.count.iter().sum::<usize>(), 2);

        let (ece, _) = expected_calibration_error(&[0.9f64], &[0], &[0], 10);
        assert!((ece - 0.1).abs() < 1e-12);

        let (ece, bins) = expected_calibration_error(&[0.8f64, 0.8], &[0, 1], &[0, 0], 10);
        assert!((ece - 0.3).abs() < 1e-12);
        assert_eq!(bins.count[8], 2);
        assert!((bins.accuracy[8] - 0.5).abs() < 1e-15);
        assert!((bins.mean_confidence[8] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ece_of_per_bin_calibrated_oracle_is_zero() {
        // Three samples in one bin, confidence equal to the empirical bin
        // accuracy (2/3 correct at confidence 2/3).
        let conf = vec![2.0f64 / 3.0; 3];
        let pred = vec![0, 0, 0];
        let labels = vec![0, 0, 1];
        let (ece, _) = expected_calibration_error(&conf, &pred, &labels, 10);
        assert!(ece.abs() < 1e-12);
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let conf = [0.91, 0.35, 0.6, 0.77, 0.52];
        let pred = [0, 1, 1, 0, 2];
        let labels = [0, 1, 0, 1, 2];
        let (a, _) = expected_calibration_error(&conf, &pred, &labels, 10);
        let perm = [3usize, 0, 4, 2, 1];
        let conf2: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let pred2: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let lab2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (b, _) = expected_calibration_error(&conf2, &pred2, &lab2, 10);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn from_probs_aggregation_and_ties() {
        // Dyadic entries make all the aggregation arithmetic exact.
        let p1 = M::from_rows(&[vec![0.625, 0.375], vec![0.25, 0.75]]);
        let p2 = M::from_rows(&[vec![0.375, 0.625], vec![0.25, 0.75]]);
        let e = EnsemblePrediction::from_probs(vec![p1.clone(), p2]).unwrap();
        // Node 0 mean is exactly (0.5, 0.5): tie breaks to class 0.
        assert_eq!(e.predicted, vec![0, 1]);
        assert_eq!(e.confidence[0], 0.5);
        assert_eq!(e.mean_probs[(1, 1)], 0.75);

        let single = EnsemblePrediction::from_probs(vec![p1.clone()]).unwrap();
        assert_eq!(single.mean_probs, p1);

        // Identical passes → zero spread.
        let e = EnsemblePrediction::from_probs(vec![p1.clone(), p1.clone(), p1.clone()]).unwrap();
        for node in 0..2 {
            assert_eq!(epistemic_variance(&e.node_stack(node)), 0.0);
            assert_eq!(mutual_information(&e.node_stack(node)), 0.0);
        }

        let bad = M::from_rows(&[vec![0.7, 0.4], vec![0.2, 0.8]]);
        assert!(EnsemblePrediction::from_probs(vec![bad]).is_err());
    }

    #[test]
    fn ensemble_rows_are_probabilities() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(95);
        let spec = LayerSpec::new(2, 2, 2).unwrap();
        let model =
            SheafModel::init(Family::SpecialOrthogonal, spec, 3, 2, 1e-8, &mut rng).unwrap();
        let e = ensemble_predict(&model, &graph, 5, &mut rng).unwrap();
        assert_eq!(e.passes(), 5);
        for p in &e.probs {
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_family_has_zero_spread() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(96);
        let spec = LayerSpec::new(2, 2, 2).unwrap();
        let model = SheafModel::init(Family::Identity, spec, 3, 2, 1e-8, &mut rng).unwrap();
        let e = ensemble_predict(&model, &graph, 4, &mut rng).unwrap();
        for node in 0..4 {
            assert_eq!(epistemic_variance(&e.node_stack(node)), 0.0);
        }
    }

    #[test]
    fn large_ensembles_converge_to_the_same_mean() {
        let graph = toy_graph();
        let mut rng = ChaCha20Rng::seed_from_u64(97);
        let spec = LayerSpec::new(1, 2, 2).unwrap();
        let model = SheafModel::init(Family::General, spec, 3, 2, 1e-8, &mut rng).unwrap();
        let t = 1000;
        let e1 = ensemble_predict(&model, &graph, t, &mut rng).unwrap();
        let e2 = ensemble_predict(&model, &graph, t, &mut rng).unwrap();
        for node in 0..4 {
            let s1 = e1.node_stack(node);
            let s2 = e2.node_stack(node);
            for c in 0..2 {
                let var = |s: &M| {
                    let mean: f64 = (0..t).map(|i| s[(i, c)]).sum::<f64>() / t as f64;
                    (0..t).map(|i| (s[(i, c)] - mean).powi(2)).sum::<f64>() / t as f64
                };
                let se = ((var(&s1) + var(&s2)) / t as f64).sqrt();
                let diff = (e1.mean_probs[(node, c)] - e2.mean_probs[(node, c)]).abs();
                assert!(diff <= 3.0 * se + 1e-12, "node {node} class {c}: {diff} vs se {se}");
            }
        }
    }
}

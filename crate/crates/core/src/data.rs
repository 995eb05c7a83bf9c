//! Dataset ingestion (a single JSON schema), split management, and a
//! stochastic block model generator with controllable homophily.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::sheaf::Graph;

/// Train/validation/test index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl SplitSpec {
    /// Validates disjointness and that train and test are nonempty;
    /// validation may be empty.
    pub fn new(train: Vec<usize>, valid: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::Contract("train and test splits must be nonempty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, set) in [("train", &train), ("valid", &valid), ("test", &test)] {
            for &i in set.iter() {
                if !seen.insert(i) {
                    return Err(Error::Contract(format!(
                        "node {i} appears in more than one split (last seen in {name})"
                    )));
                }
            }
        }
        Ok(SplitSpec { train, valid, test })
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }
}

/// A graph with (optionally) its data splits.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub graph: Arc<Graph<S>>,
    pub splits: Option<SplitSpec>,
}

impl<S: Real> Dataset<S> {
    pub fn new(graph: Arc<Graph<S>>, splits: Option<SplitSpec>) -> Result<Self> {
        if let Some(s) = &splits {
            let n = graph.num_nodes();
            for &i in s.train().iter().chain(s.valid()).chain(s.test()) {
                if i >= n {
                    return Err(Error::Contract(format!(
                        "split references node {i}, but the graph has {n} nodes"
                    )));
                }
            }
        }
        Ok(Dataset { graph, splits })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    num_nodes: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<SplitsFile>,
}

/// Loads and validates a dataset from the documented JSON schema.
pub fn load_graph_dataset<S: Real>(path: &Path) -> Result<Dataset<S>> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    dataset_from_file(file).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn dataset_from_file<S: Real>(file: DatasetFile) -> Result<Dataset<S>> {
    let n = file.num_nodes;
    if file.features.len() != n {
        return Err(Error::Parse(format!(
            "field \"features\": expected {n} rows, found {}",
            file.features.len()
        )));
    }
    if file.labels.len() != n {
        return Err(Error::Parse(format!(
            "field \"labels\": expected {n} entries, found {}",
            file.labels.len()
        )));
    }
    let m = file.features.first().map_or(0, Vec::len);
    for (i, row) in file.features.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Parse(format!(
                "field \"features\": row {i} has {} entries, row 0 has {m}",
                row.len()
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for (k, &(u, v)) in file.edges.iter().enumerate() {
        if u == v {
            return Err(Error::Parse(format!("field \"edges\": entry {k} is a self-loop ({u},{v})")));
        }
        if u > v {
            return Err(Error::Parse(format!(
                "field \"edges\": entry {k} ({u},{v}) must satisfy u < v"
            )));
        }
        if v >= n {
            return Err(Error::Parse(format!(
                "field \"edges\": entry {k} references node {v}, but num_nodes is {n}"
            )));
        }
        if !seen.insert((u, v)) {
            return Err(Error::Parse(format!("field \"edges\": entry {k} ({u},{v}) is a duplicate")));
        }
    }
    for (i, &l) in file.labels.iter().enumerate() {
        if l >= file.num_classes {
            return Err(Error::Parse(format!(
                "field \"labels\": node {i} has label {l}, but num_classes is {}",
                file.num_classes
            )));
        }
    }
    let features = Matrix::from_fn(n, m, |i, j| S::of(file.features[i][j]));
    let graph = Graph::new(n, file.edges, features, file.labels, file.num_classes)
        .map_err(|e| Error::Parse(format!("{e}")))?;
    let splits = match file.splits {
        None => None,
        Some(s) => Some(
            SplitSpec::new(s.train, s.valid, s.test)
                .map_err(|e| Error::Parse(format!("field \"splits\": {e}")))?,
        ),
    };
    Dataset::new(Arc::new(graph), splits)
        .map_err(|e| Error::Parse(format!("field \"splits\": {e}")))
}

/// Writes a dataset back out in the same JSON schema.
pub fn save_graph_dataset<S: Real>(dataset: &Dataset<S>, path: &Path) -> Result<()> {
    let g = &dataset.graph;
    let file = DatasetFile {
        num_nodes: g.num_nodes(),
        num_classes: g.num_classes(),
        features: (0..g.num_nodes())
            .map(|i| g.features().row(i).iter().map(|v| v.to_f64c()).collect())
            .collect(),
        labels: g.labels().to_vec(),
        edges: g.edges().to_vec(),
        splits: dataset.splits.as_ref().map(|s| SplitsFile {
            train: s.train().to_vec(),
            valid: s.valid().to_vec(),
            test: s.test().to_vec(),
        }),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Stochastic block model configuration.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SBMConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub mean_degree: f64,
    /// Expected fraction of edges whose endpoints share a class.
    pub homophily: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl SBMConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_nodes < self.num_classes {
            return Err(Error::Config("need n >= C >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(Error::Config("homophily must lie in [0, 1]".into()));
        }
        if !(self.mean_degree >= 0.0 && self.mean_degree.is_finite()) {
            return Err(Error::Config("mean_degree must be finite and >= 0".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config("feature_noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Samples a stochastic block model dataset, deterministic in the seed.
///
/// Classes are uniform; with T = n·mean_degree/2 expected edges, same-class
/// pairs are kept with probability h·T/N_in and cross-class pairs with
/// (1−h)·T/N_out, where N_in/N_out count the realized pair types. Features
/// are a one-hot class embedding plus N(0, noise²), zero-padded up to
/// feature_dim (or pushed through a seeded Gaussian projection when
/// feature_dim < C).
pub fn generate_sbm<S: Real>(cfg: &SBMConfig) -> Result<Dataset<S>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_nodes;
    let c = cfg.num_classes;

    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();

    let mut n_in = 0u64;
    let mut n_out = 0u64;
    for u in 0..n {
        for v in (u + 1)..n {
            if labels[u] == labels[v] {
                n_in += 1;
            } else {
                n_out += 1;
            }
        }
    }
    let target = n as f64 * cfg.mean_degree / 2.0;
    let p_of = |mass: f64, pairs: u64, kind: &str| -> Result<f64> {
        if pairs == 0 {
            if mass > 1e-12 {
                return Err(Error::Config(format!(
                    "no {kind} pairs exist, but the requested homophily assigns them edges"
                )));
            }
            return Ok(0.0);
        }
        let p = mass / pairs as f64;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "infeasible homophily/mean_degree: {kind} edge probability {p:.4} outside [0, 1]"
            )));
        }
        Ok(p)
    };
    let p_in = p_of(cfg.homophily * target, n_in, "same-class")?;
    let p_out = p_of((1.0 - cfg.homophily) * target, n_out, "cross-class")?;

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    // One-hot embedding with Gaussian jitter, in class-coordinate space.
    let mut base = Matrix::<f64>::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
            let jitter: f64 = rng.sample(StandardNormal);
            base[(i, j)] = onehot + cfg.feature_noise * jitter;
        }
    }
    let m = cfg.feature_dim;
    let features: Matrix<S> = if m >= c {
        Matrix::from_fn(n, m, |i, j| if j < c { S::of(base[(i, j)]) } else { S::zero() })
    } else {
        // Random projection to fewer dimensions than classes; entries are
        // N(0, 1/C) so squared norms are roughly preserved.
        let scale = 1.0 / (c as f64).sqrt();
        let proj =
            Matrix::<f64>::from_fn(c, m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let projected = base.matmul(&proj);
        Matrix::from_fn(n, m, |i, j| S::of(projected[(i, j)]))
    };

    let graph = Graph::new(n, edges, features, labels, c)?;
    Dataset::new(Arc::new(graph), None)
}

/// Seeded shuffle + contiguous slicing with largest-remainder rounding;
/// each split is returned sorted.
pub fn make_splits(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) {
        return Err(Error::Config("split ratios must all be positive".into()));
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split ratios must sum to 1".into()));
    }
    let mut sizes = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    for (i, r) in [rt, rv, rs].into_iter().enumerate() {
        let exact = r * n as f64;
        sizes[i] = exact.floor() as usize;
        fracs[i] = exact - exact.floor();
    }
    let mut rem = n - sizes.iter().sum::<usize>();
    // Largest remainder first; ties go to the lower index.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if rem == 0 {
            break;
        }
        sizes[i] += 1;
        rem -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "n = {n} leaves an empty split at ratios ({rt}, {rv}, {rs})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut train: Vec<usize> = perm[..sizes[0]].to_vec();
    let mut valid: Vec<usize> = perm[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let mut test: Vec<usize> = perm[sizes[0] + sizes[1]..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    SplitSpec::new(train, valid, test)
}

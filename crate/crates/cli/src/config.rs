//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags (flags win).

use std::path::{Path, PathBuf};

use sheafnet::data::{self, Dataset, SBMConfig};
use sheafnet::nn::Family;
use sheafnet::{Error, Result};

/// One record drives every command; each command reads the fields it needs.
/// Serialized form is a JSON object with any subset of the fields below.
#[derive(Clone, Debug, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset JSON path; mutually exclusive with `sbm`.
    pub dataset: Option<PathBuf>,
    /// Synthesize the dataset instead of loading one.
    pub sbm: Option<SBMConfig>,
    /// Train/valid/test fractions used when the dataset carries no splits.
    pub split_ratios: (f64, f64, f64),
    /// Shuffle seed for synthesized splits; fixed so train and eval runs
    /// with different master seeds still see the same partition.
    pub split_seed: u64,

    pub family: Family,
    pub stalk_dim: usize,
    pub channels: usize,
    pub layers: usize,
    /// Eigenvalue floor of the degree-block inverse square root.
    pub eps: f64,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub sheaf_weight_decay: f64,
    pub dropout_input: f64,
    pub dropout_layer: f64,
    pub epochs: usize,
    /// Epochs without a validation-accuracy improvement before training stops.
    pub patience: usize,
    /// Forward passes averaged per objective evaluation.
    pub k_samples: usize,
    pub anneal_cycle: usize,
    pub anneal_ramp: f64,
    /// Fixed KL weight; unset means the cyclic anneal schedule.
    pub lambda: Option<f64>,

    /// Forward passes per ensemble prediction.
    pub ensemble: usize,
    /// Random streams for eval/uq; rows are sorted by seed.
    pub seeds: Vec<u64>,
    /// Calibration bins.
    pub bins: usize,
    /// Trained model file for eval/uq.
    pub model: Option<PathBuf>,

    /// Restriction-map file for diffuse.
    pub sheaf_spec: Option<PathBuf>,
    pub steps: usize,
    pub alpha: f64,

    pub out_dir: PathBuf,
    /// Master seed: initialization and training noise.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            sbm: None,
            split_ratios: (0.48, 0.32, 0.20),
            split_seed: 0,
            family: Family::SpecialOrthogonal,
            stalk_dim: 2,
            channels: 8,
            layers: 2,
            eps: 1e-8,
            learning_rate: 0.02,
            weight_decay: 1e-8,
            sheaf_weight_decay: 1e-9,
            dropout_input: 0.0,
            dropout_layer: 0.0,
            epochs: 1000,
            patience: 200,
            k_samples: 1,
            anneal_cycle: 100,
            anneal_ramp: 0.5,
            lambda: None,
            ensemble: 3,
            seeds: vec![0, 1, 2, 3, 4],
            bins: 10,
            model: None,
            sheaf_spec: None,
            steps: 100,
            alpha: 0.5,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the JSON file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

pub fn parse_family(name: &str) -> Result<Family> {
    match name {
        "diagonal" => Ok(Family::Diagonal),
        "special_orthogonal" => Ok(Family::SpecialOrthogonal),
        "general" => Ok(Family::General),
        "identity" => Ok(Family::Identity),
        other => Err(Error::Config(format!(
            "unknown family {other:?}: expected diagonal, special_orthogonal, general, or identity"
        ))),
    }
}

/// Loads or synthesizes the dataset named by the config.
pub fn resolve_dataset(cfg: &RunConfig) -> Result<Dataset<f64>> {
    match (&cfg.dataset, &cfg.sbm) {
        (Some(_), Some(_)) => {
            Err(Error::Config("give either a dataset path or an sbm block, not both".into()))
        }
        (Some(path), None) => data::load_graph_dataset(path),
        (None, Some(sbm)) => data::generate_sbm(sbm),
        (None, None) => Err(Error::Config("no dataset: set a dataset path or an sbm block".into())),
    }
}

/// Attaches synthesized splits when the dataset carries none.
pub fn ensure_splits(dataset: Dataset<f64>, cfg: &RunConfig) -> Result<Dataset<f64>> {
    if dataset.splits.is_some() {
        return Ok(dataset);
    }
    let splits = data::make_splits(dataset.graph.num_nodes(), cfg.split_ratios, cfg.split_seed)?;
    Dataset::new(dataset.graph.clone(), Some(splits))
}

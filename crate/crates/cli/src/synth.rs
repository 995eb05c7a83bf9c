//! Synthetic dataset generation: block-model graph, features, and splits,
//! written as one dataset JSON file.

use std::fs;

use sheafnet::data::save_graph_dataset;
use sheafnet::{Error, Result};

use crate::config::{ensure_splits, resolve_dataset, RunConfig};

pub const DATASET_FILE: &str = "dataset.json";

pub fn run_synth(cfg: &RunConfig) -> Result<()> {
    if cfg.sbm.is_none() {
        return Err(Error::Config("synth needs sbm parameters".into()));
    }
    if cfg.dataset.is_some() {
        return Err(Error::Config("synth generates its dataset; drop the dataset path".into()));
    }
    let dataset = ensure_splits(resolve_dataset(cfg)?, cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    save_graph_dataset(&dataset, &cfg.out_dir.join(DATASET_FILE))
}

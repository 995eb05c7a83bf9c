//! Training run: variational objective, Adam, early stopping on validation
//! accuracy, per-epoch CSV log, best-validation parameter snapshot.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use sheafnet::nn::{LayerSpec, SheafModel};
use sheafnet::uq::ensemble_predict;
use sheafnet::variational::{elbo_gradients, kl_anneal_weight, AnnealSchedule};
use sheafnet::{Error, Result};

use crate::config::{ensure_splits, resolve_dataset, RunConfig};
use crate::optim::Adam;

pub const LOG_FILE: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.json";

/// Fraction of `nodes` whose prediction matches the label.
pub fn accuracy(predicted: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&v| predicted[v] == labels[v]).count();
    hits as f64 / nodes.len() as f64
}

pub fn save_model(model: &SheafModel<f64>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Config(format!("cannot serialize model: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SheafModel<f64>> {
    let text = fs::read_to_string(path)?;
    let mut model: SheafModel<f64> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    model.params.reindex();
    Ok(model)
}

pub fn run_train(cfg: &RunConfig) -> Result<()> {
    let dataset = ensure_splits(resolve_dataset(cfg)?, cfg)?;
    let graph = dataset.graph.clone();
    let splits = dataset.splits.as_ref().expect("ensure_splits always attaches splits");

    let spec = LayerSpec::new(cfg.layers, cfg.stalk_dim, cfg.channels)?;
    let schedule = AnnealSchedule::new(cfg.anneal_cycle, cfg.anneal_ramp)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = SheafModel::init(
        cfg.family,
        spec,
        graph.num_features(),
        graph.num_classes(),
        cfg.eps,
        &mut rng,
    )?
    .with_dropout(cfg.dropout_input, cfg.dropout_layer)?;
    let mut opt = Adam::new(cfg.learning_rate);
    // Accuracy probes get their own stream so the objective's noise sequence
    // does not depend on how often we evaluate.
    let mut probe_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    fs::create_dir_all(&cfg.out_dir)?;
    let mut log = BufWriter::new(fs::File::create(cfg.out_dir.join(LOG_FILE))?);
    writeln!(log, "epoch,nll,kl,lambda,train_acc,valid_acc")?;

    // Early stopping tracks validation accuracy; datasets without a
    // validation split fall back to training accuracy.
    let stop_nodes = if splits.valid().is_empty() { splits.train() } else { splits.valid() };
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let lambda = cfg.lambda.unwrap_or_else(|| kl_anneal_weight(epoch, &schedule));
        let (breakdown, grads) =
            elbo_gradients(&model, &graph, splits.train(), cfg.k_samples, lambda, true, &mut rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonConvergence(format!(
                "non-finite loss at epoch {epoch}: nll={} kl={} lambda={lambda}",
                breakdown.nll, breakdown.kl
            )));
        }
        opt.step(&mut model.params, &grads, cfg.weight_decay, cfg.sheaf_weight_decay);

        let probe = ensemble_predict(&model, &graph, 1, &mut probe_rng)?;
        let train_acc = accuracy(&probe.predicted, graph.labels(), splits.train());
        let valid_acc = accuracy(&probe.predicted, graph.labels(), stop_nodes);
        writeln!(
            log,
            "{epoch},{},{},{lambda},{train_acc},{valid_acc}",
            breakdown.nll, breakdown.kl
        )?;

        if valid_acc > best_acc {
            best_acc = valid_acc;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    log.flush()?;

    model.params = best_params;
    save_model(&model, &cfg.out_dir.join(MODEL_FILE))
}

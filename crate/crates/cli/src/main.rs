//! `sheafnet`: train, evaluate, and probe sheaf diffusion networks on small
//! graphs. Every command is deterministic given (config, seed) and writes
//! CSV with a fixed header into the output directory.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure at runtime.

mod config;
mod diffuse;
mod optim;
mod report;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sheafnet::data::SBMConfig;
use sheafnet::{Error, Result};

use config::{parse_family, RunConfig};

#[derive(Parser)]
#[command(name = "sheafnet", version, about = "Sheaf diffusion networks on small graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes train_log.csv and model.json.
    Train(TrainArgs),
    /// Per-seed test accuracy of a trained model; writes eval.csv.
    Eval(EvalArgs),
    /// Per-node uncertainty over the test split; writes uq.csv.
    Uq(UqArgs),
    /// Run sheaf diffusion and test separability of its limit; writes diffuse.csv.
    Diffuse(DiffuseArgs),
    /// Generate a block-model dataset with splits; writes dataset.json.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Shared {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (train) or dataset seed (synth).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Shared {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = self.out {
            cfg.out_dir = out;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Dataset JSON path (alternative to an sbm block in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// diagonal, special_orthogonal, general, or identity.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    stalk_dim: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    sheaf_weight_decay: Option<f64>,
    #[arg(long)]
    dropout_input: Option<f64>,
    #[arg(long)]
    dropout_layer: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Forward passes averaged per objective evaluation.
    #[arg(long)]
    k_samples: Option<usize>,
    /// Fixed KL weight instead of the cyclic anneal schedule.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    anneal_cycle: Option<usize>,
    #[arg(long)]
    anneal_ramp: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

impl TrainArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = self.shared.into_config()?;
        if let Some(data) = self.data {
            cfg.dataset = Some(data);
            cfg.sbm = None;
        }
        if let Some(name) = &self.family {
            cfg.family = parse_family(name)?;
        }
        set(&mut cfg.stalk_dim, self.stalk_dim);
        set(&mut cfg.channels, self.channels);
        set(&mut cfg.layers, self.layers);
        set(&mut cfg.learning_rate, self.lr);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.sheaf_weight_decay, self.sheaf_weight_decay);
        set(&mut cfg.dropout_input, self.dropout_input);
        set(&mut cfg.dropout_layer, self.dropout_layer);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.patience, self.patience);
        set(&mut cfg.k_samples, self.k_samples);
        set(&mut cfg.anneal_cycle, self.anneal_cycle);
        set(&mut cfg.anneal_ramp, self.anneal_ramp);
        set(&mut cfg.eps, self.eps);
        if self.lambda.is_some() {
            cfg.lambda = self.lambda;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Trained model JSON.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset JSON path (alternative to an sbm block in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Forward passes per ensemble prediction.
    #[arg(long)]
    ensemble: Option<usize>,
    /// Comma-separated random streams, e.g. --seeds 0,1,2.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl EvalArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = self.shared.into_config()?;
        if let Some(model) = self.model {
            cfg.model = Some(model);
        }
        if let Some(data) = self.data {
            cfg.dataset = Some(data);
            cfg.sbm = None;
        }
        set(&mut cfg.ensemble, self.ensemble);
        if let Some(seeds) = self.seeds {
            cfg.seeds = seeds;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct UqArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Calibration bins.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct DiffuseArgs {
    #[command(flatten)]
    shared: Shared,
    /// Dataset JSON path (alternative to an sbm block in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sheaf spec JSON listing per-edge restriction maps.
    #[arg(long)]
    sheaf: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Euler step size.
    #[arg(long)]
    alpha: Option<f64>,
}

impl DiffuseArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = self.shared.into_config()?;
        if let Some(data) = self.data {
            cfg.dataset = Some(data);
            cfg.sbm = None;
        }
        if let Some(sheaf) = self.sheaf {
            cfg.sheaf_spec = Some(sheaf);
        }
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.alpha, self.alpha);
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    num_nodes: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    mean_degree: Option<f64>,
    /// Expected fraction of edges within a class, in [0, 1].
    #[arg(long)]
    homophily: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    feature_noise: Option<f64>,
}

impl SynthArgs {
    fn into_config(self) -> Result<RunConfig> {
        let seed_flag = self.shared.seed;
        let mut cfg = self.shared.into_config()?;
        // A two-class heterophilic toy by default; any field can be
        // overridden from the config file's sbm block or by flags.
        let mut sbm = cfg.sbm.take().unwrap_or(SBMConfig {
            num_nodes: 200,
            num_classes: 2,
            mean_degree: 6.0,
            homophily: 0.1,
            feature_dim: 2,
            feature_noise: 0.5,
            seed: 0,
        });
        set(&mut sbm.num_nodes, self.num_nodes);
        set(&mut sbm.num_classes, self.num_classes);
        set(&mut sbm.mean_degree, self.mean_degree);
        set(&mut sbm.homophily, self.homophily);
        set(&mut sbm.feature_dim, self.feature_dim);
        set(&mut sbm.feature_noise, self.feature_noise);
        set(&mut sbm.seed, seed_flag);
        cfg.sbm = Some(sbm);
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => train::run_train(&args.into_config()?),
        Command::Eval(args) => report::run_eval(&args.into_config()?),
        Command::Uq(args) => {
            let bins = args.bins;
            let mut cfg = args.eval.into_config()?;
            set(&mut cfg.bins, bins);
            report::run_uq(&cfg)
        }
        Command::Diffuse(args) => diffuse::run_diffuse(&args.into_config()?),
        Command::Synth(args) => synth::run_synth(&args.into_config()?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Config(_) | Error::Parse(_) | Error::Io(_) => 2,
        Error::Singular(_)
        | Error::Domain(_)
        | Error::UnsupportedDimension(_)
        | Error::NonConvergence(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Subcommands of the `hindcaus` binary.

mod selfcheck;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use hindcaus::env::{generate_dataset, read_dataset, write_dataset, Dataset, RandomInterventionPolicy};
use hindcaus::eval::{self, factor_labels, write_heatmaps, RunMetrics};
use hindcaus::models::EncoderVariant;
use hindcaus::numcore::rng;
use hindcaus::trainer::{
    self, load_run_checkpoint, read_snapshots, ExperimentConfig, FinalGraph, CHECKPOINT_DIR, CMI_HISTORY_FILE,
    GRAPH_FILE, METRICS_FILE,
};

/// File names inside a `gen-data` output directory.
pub const TRAIN_DATA: &str = "train.jsonl";
pub const EVAL_DATA: &str = "eval.jsonl";
/// Resolved experiment config saved in every run directory.
pub const RUN_CONFIG: &str = "config.toml";
pub const FIGURES_LOSS: &str = "loss_curves.csv";

/// Hidden-state identification and causal graph learning from offline trajectories.
#[derive(Debug, Parser)]
#[command(name = "hindcaus", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and evaluation episodes.
    GenData(GenData),
    /// Train one run.
    Train(Train),
    /// Evaluate one or more runs (one per seed) and write a report.
    Eval(Eval),
    /// Render CMI heatmaps and loss curves of a run.
    ExportFigures(ExportFigures),
    /// Check gradients, environment properties, the CMI oracle and dataset I/O.
    Selfcheck,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub config: PathBuf,
    /// Training episodes (overrides `data.train_episodes`).
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving `train.jsonl` and `eval.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Run directories; repeat once per seed.
    #[arg(long, required = true, num_args = 1..)]
    pub run: Vec<PathBuf>,
    /// Evaluation episodes with ground-truth hiddens.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `report.json` and `tables.csv`.
    #[arg(long)]
    pub report: PathBuf,
    /// Seeds a complete report needs; fewer runs mark it partial.
    #[arg(long, default_value_t = 3)]
    pub expected_seeds: usize,
    /// Probe hard samples instead of logits.
    #[arg(long)]
    pub probe_samples: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct ExportFigures {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::ExportFigures(a) => export_figures(a),
        Command::Selfcheck => selfcheck::run(),
    }
}

fn echo(cfg: &ExperimentConfig) {
    println!("# resolved config\n{}", cfg.to_toml());
}

/// Stream key separating evaluation episodes from training episodes.
fn eval_seed(seed: u64) -> u64 {
    rng::stream_key(seed, &[0xE7A1])
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.env.seed = s;
    }
    if let Some(n) = a.episodes {
        cfg.data.train_episodes = n;
    }
    echo(&cfg);
    if a.workers == 0 {
        bail!(trainer::TrainError::Config("--workers must be positive".into()));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let seed = cfg.env.seed;
    for (file, n, s) in [
        (TRAIN_DATA, cfg.data.train_episodes, seed),
        (EVAL_DATA, cfg.data.eval_episodes, eval_seed(seed)),
    ] {
        let ds = generate_dataset(&cfg.env, &RandomInterventionPolicy, n, s, a.workers)?;
        let path = a.out.join(file);
        write_dataset(&ds, &path)?;
        info!("wrote {n} episodes to {}", path.display());
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn train(a: Train) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    let t = &mut cfg.train;
    if let Some(e) = a.encoder {
        t.encoder = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if a.data.is_some() {
        t.data = a.data;
    }
    if a.out.is_some() {
        t.out = a.out;
    }
    echo(&cfg);
    let (Some(data), Some(out)) = (cfg.train.data.clone(), cfg.train.out.clone()) else {
        bail!(trainer::TrainError::Config("train needs a dataset (--data) and a run directory (--out)".into()));
    };
    let dataset = load_data(&data)?;
    if dataset.header.config.dynamics_hash() != cfg.env.dynamics_hash() {
        bail!(trainer::TrainError::Dataset(format!(
            "{} was generated for a different environment than the config describes",
            data.display()
        )));
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RUN_CONFIG), cfg.to_toml()).with_context(|| format!("writing config into {}", out.display()))?;
    let outcome = trainer::train(&cfg.train, &dataset, Some(&out))?;
    let last = outcome.metrics.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} steps, final loss {last:.4}, graph {:?}", cfg.train.steps, outcome.graph());
    Ok(())
}

struct LoadedRun {
    cfg: ExperimentConfig,
    binarized: Vec<Vec<u8>>,
    store: hindcaus::models::ParameterStore,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = ExperimentConfig::load(&dir.join(RUN_CONFIG))?;
    let (store, _) = load_run_checkpoint(&dir.join(CHECKPOINT_DIR))?;
    let text = fs::read_to_string(dir.join(GRAPH_FILE)).with_context(|| format!("{} has no final graph", dir.display()))?;
    let graph: FinalGraph = serde_json::from_str(&text).context("parsing graph.json")?;
    Ok(LoadedRun {
        cfg,
        binarized: graph.binarized,
        store,
    })
}

fn evaluate(a: Eval) -> Result<()> {
    let data = load_data(&a.data)?;
    let runs = a.run.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0].cfg;
    echo(first);
    let encoder = first.train.encoder;
    for r in &runs {
        if r.cfg.env.dynamics_hash() != data.header.config.dynamics_hash() {
            bail!(trainer::TrainError::Dataset("evaluation data comes from a different environment than the run".into()));
        }
        if r.cfg.train.encoder != encoder {
            bail!(trainer::TrainError::Config("all runs of one report must share the encoder".into()));
        }
    }
    let gt = hindcaus::env::TransitionGraphGT(data.header.gt_graph.clone());
    let input = if a.probe_samples { eval::ProbeInput::Samples } else { eval::ProbeInput::Logits };
    let one = |r: &LoadedRun| -> Result<RunMetrics> {
        let seed = r.cfg.train.seed;
        let pred = eval::prediction_accuracies(&r.store, &data.episodes, seed)?;
        let probes = eval::hidden_decoding_accuracy(&r.store, &data.episodes, input, seed)?;
        Ok(RunMetrics {
            seed,
            graph_accuracy: hindcaus::graph::graph_accuracy(&r.binarized, &gt)?,
            hidden_decoding: probes.iter().map(|p| p.accuracy).collect(),
            degenerate_probe: probes.iter().any(|p| p.degenerate),
            observation_prediction: pred.observed,
            hidden_prediction: pred.hidden,
            reward_prediction: pred.reward,
        })
    };
    let workers = a.workers.max(1);
    let mut metrics = Vec::with_capacity(runs.len());
    for chunk in runs.chunks(workers) {
        let done: Vec<Result<RunMetrics>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|r| s.spawn(|| one(r))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        });
        for m in done {
            metrics.push(m?);
        }
    }
    let env = &data.header.config;
    let report = eval::aggregate(
        encoder.name(),
        &env.dynamics_hash(),
        data.episodes.len(),
        &env.observed_indices(),
        &env.hidden_indices,
        metrics,
        a.expected_seeds,
    );
    if report.partial {
        log::warn!("{} of {} seeds evaluated; report marked partial", report.runs.len(), report.expected_seeds);
    }
    eval::export_report(&report, &a.report)?;
    for (k, s) in &report.summary {
        println!("{k:32} {}", s.table_cell());
    }
    Ok(())
}

fn export_figures(a: ExportFigures) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.run.join(RUN_CONFIG))?;
    echo(&cfg);
    let snaps = read_snapshots(&a.run)?;
    if snaps.is_empty() {
        bail!(trainer::TrainError::Config(format!("{} has no CMI snapshots", a.run.display())));
    }
    let labels = factor_labels(cfg.env.n_factors, &cfg.env.hidden_indices);
    let mats: Vec<(u64, Vec<Vec<f64>>)> = snaps.iter().map(|s| (s.step, s.values.clone())).collect();
    let files = write_heatmaps(&mats, cfg.train.threshold, &labels, &a.out)?;
    for (src, dst) in [(METRICS_FILE, FIGURES_LOSS), (CMI_HISTORY_FILE, CMI_HISTORY_FILE)] {
        fs::copy(a.run.join(src), a.out.join(dst)).with_context(|| format!("copying {src}"))?;
    }
    println!("wrote {} heatmaps and loss curves to {}", files.len(), a.out.display());
    Ok(())
}

/// Exit code for a failed command: 3 for numerical aborts, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(e.downcast_ref::<trainer::TrainError>(), Some(trainer::TrainError::NonFinite { .. }))
    });
    if numeric {
        3
    } else {
        2
    }
}

/// Parses `EncoderVariant` names for clap.
pub fn parse_encoder(s: &str) -> Result<EncoderVariant, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = EncoderVariant::ALL.iter().map(|e| e.name()).collect();
        format!("unknown encoder `{s}`, expected one of {}", names.join(", "))
    })
}

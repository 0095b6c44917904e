//! The training loop.
//!
//! Each step samples `m` episodes from the fixed dataset, builds the total
//! objective under the current binarized graph, takes one Adam step on
//! `θ_o, θ_h, φ, ψ`, and copies `φ` into `φ̄`. Every `N` steps the CMI of
//! the current minibatch is estimated, folded into the moving average, and
//! the graph is rebinarized.
//!
//! All randomness is addressed by `(seed, step, …)`, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would have.

mod config;

pub use config::{lr_schedule, DataConfig, ExperimentConfig, TrainConfig};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Dataset, Trajectory};
use crate::graph::{estimate_cmi, CmiMatrix, GraphError};
use crate::models::{load_checkpoint, save_checkpoint, Batch, ModelError, ParameterStore};
use crate::numcore::{adam_step, rng, Graph, NumError};
use crate::objective::{total_objective, LossBreakdown, ObjectiveError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CMI_HISTORY_FILE: &str = "cmi_history.csv";
pub const CMI_DIR: &str = "cmi";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABORT_DIR: &str = "abort_checkpoint";
pub const GRAPH_FILE: &str = "graph.json";
pub const TRAINER_STATE: &str = "trainer.json";
const BATCH_STREAM: u64 = 0xBA7C;

pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "lr",
    "full_nll",
    "masked_nll",
    "causal_nll",
    "full_kl",
    "masked_kl",
    "causal_kl",
    "reward_ce",
    "total",
];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("numerical abort at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("{0}")]
    Objective(ObjectiveError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Model(m) => Self::Model(m),
            other => Self::Objective(other),
        }
    }
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        Self::Model(ModelError::Num(e))
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One metrics CSV row; `step` counts completed optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub full_nll: f64,
    pub masked_nll: f64,
    pub causal_nll: f64,
    pub full_kl: f64,
    pub masked_kl: f64,
    pub causal_kl: f64,
    pub reward_ce: f64,
    pub total: f64,
}

impl MetricsRow {
    fn new(step: u64, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            full_nll: b.full_nll,
            masked_nll: b.masked_nll,
            causal_nll: b.causal_nll,
            full_kl: b.full_kl,
            masked_kl: b.masked_kl,
            causal_kl: b.causal_kl,
            reward_ce: b.reward_ce,
            total: b.total,
        }
    }
}

/// The CMI matrix after one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiSnapshot {
    pub step: u64,
    pub threshold: f64,
    /// Raw estimate of this evaluation.
    pub fresh: Vec<Vec<f64>>,
    /// Moving average after folding in `fresh`.
    pub values: Vec<Vec<f64>>,
    pub binarized: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    cmi: CmiMatrix,
    dynamics_hash: String,
}

/// Final graph artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalGraph {
    pub step: u64,
    pub threshold: f64,
    pub values: Vec<Vec<f64>>,
    pub binarized: Vec<Vec<u8>>,
}

pub struct TrainOutcome {
    pub store: ParameterStore,
    pub cmi: CmiMatrix,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<CmiSnapshot>,
}

impl TrainOutcome {
    pub fn graph(&self) -> Vec<Vec<u8>> {
        self.cmi.binarized()
    }
}

/// Episode indices of the minibatch for `step`, drawn with replacement.
pub fn minibatch_indices(seed: u64, step: u64, n_episodes: usize, m: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[BATCH_STREAM, step]);
    (0..m).map(|_| r.gen_range(0..n_episodes)).collect()
}

/// Copies `φ` into `φ̄`.
pub fn sync_target(store: &mut ParameterStore) {
    store.sync_target();
}

struct RunFiles {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    cmi: csv::Writer<File>,
}

impl RunFiles {
    fn create(dir: &Path, keep_metrics: &[MetricsRow], keep_snapshots: &[CmiSnapshot]) -> Result<Self, TrainError> {
        fs::create_dir_all(dir.join(CMI_DIR)).map_err(io(dir))?;
        let mpath = dir.join(METRICS_FILE);
        let mut metrics = csv::WriterBuilder::new().has_headers(false).from_path(&mpath)?;
        metrics.write_record(METRICS_COLUMNS)?;
        for row in keep_metrics {
            metrics.serialize(row)?;
        }
        let cpath = dir.join(CMI_HISTORY_FILE);
        let mut cmi = csv::Writer::from_path(&cpath)?;
        cmi.write_record(["step", "i", "j", "value"])?;
        let mut files = Self {
            dir: dir.to_path_buf(),
            metrics,
            cmi,
        };
        for s in keep_snapshots {
            files.write_cmi_rows(s)?;
        }
        Ok(files)
    }

    fn write_cmi_rows(&mut self, s: &CmiSnapshot) -> Result<(), TrainError> {
        for (i, row) in s.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                self.cmi
                    .write_record([s.step.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, s: &CmiSnapshot) -> Result<(), TrainError> {
        self.write_cmi_rows(s)?;
        self.cmi.flush().map_err(io(&self.dir))?;
        let path = self.dir.join(CMI_DIR).join(format!("step_{:06}.json", s.step));
        write_json(&path, s)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let file = File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| TrainError::Config(e.to_string()))?;
    w.flush().map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Reads every per-evaluation CMI snapshot of a run directory, by step.
pub fn read_snapshots(run: &Path) -> Result<Vec<CmiSnapshot>, TrainError> {
    let dir = run.join(CMI_DIR);
    let mut out: Vec<CmiSnapshot> = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&dir).map_err(io(&dir))? {
        let path = entry.map_err(io(&dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(read_json(&path)?);
        }
    }
    out.sort_by_key(|s| s.step);
    Ok(out)
}

fn check_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<(), TrainError> {
    let h = &dataset.header;
    if h.config.hash() != h.config_hash {
        return Err(TrainError::Dataset("header hash does not match its config".into()));
    }
    if dataset.episodes.is_empty() {
        return Err(TrainError::Dataset("no episodes".into()));
    }
    cfg.validate()
}

/// Saves the model and trainer state of a run.
pub fn save_run_checkpoint(dir: &Path, store: &ParameterStore, cmi: &CmiMatrix, dataset: &Dataset) -> Result<(), TrainError> {
    save_checkpoint(store, dir, &dataset.header.config_hash)?;
    write_json(
        &dir.join(TRAINER_STATE),
        &TrainerState {
            cmi: cmi.clone(),
            dynamics_hash: dataset.header.config.dynamics_hash(),
        },
    )
}

/// Loads a checkpoint written by [`save_run_checkpoint`].
pub fn load_run_checkpoint(dir: &Path) -> Result<(ParameterStore, CmiMatrix), TrainError> {
    let (store, _) = load_checkpoint(dir, None)?;
    let state: TrainerState = read_json(&dir.join(TRAINER_STATE))?;
    Ok((store, state.cmi))
}

/// Trains from scratch. With `run_dir`, writes metrics, CMI history,
/// snapshots, checkpoints and the final graph there.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, run_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    check_dataset(cfg, dataset)?;
    let env = &dataset.header.config;
    let store = ParameterStore::new(cfg.model_spec(env), cfg.seed);
    let cmi = CmiMatrix::new(env.n_factors, cfg.threshold, cfg.ema_coeff)?;
    run_loop(cfg, dataset, run_dir, store, cmi, Vec::new(), Vec::new())
}

/// Continues the run in `run_dir` from its latest checkpoint up to `cfg.steps`.
pub fn resume(cfg: &TrainConfig, dataset: &Dataset, run_dir: &Path) -> Result<TrainOutcome, TrainError> {
    check_dataset(cfg, dataset)?;
    let ckpt = run_dir.join(CHECKPOINT_DIR);
    let (store, cmi) = load_run_checkpoint(&ckpt)?;
    let state: TrainerState = read_json(&ckpt.join(TRAINER_STATE))?;
    if state.dynamics_hash != dataset.header.config.dynamics_hash() {
        return Err(TrainError::Dataset("checkpoint was trained on a different environment".into()));
    }
    let expected = cfg.model_spec(&dataset.header.config);
    ParameterStore::new(expected, 0).check_compatible(&store)?;
    let done = store.step;
    let metrics: Vec<MetricsRow> = read_metrics(&run_dir.join(METRICS_FILE))?
        .into_iter()
        .filter(|r| r.step <= done)
        .collect();
    let snapshots: Vec<CmiSnapshot> = read_snapshots(run_dir)?.into_iter().filter(|s| s.step <= done).collect();
    run_loop(cfg, dataset, Some(run_dir), store, cmi, metrics, snapshots)
}

fn run_loop(
    cfg: &TrainConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
    mut store: ParameterStore,
    mut cmi: CmiMatrix,
    mut metrics: Vec<MetricsRow>,
    mut snapshots: Vec<CmiSnapshot>,
) -> Result<TrainOutcome, TrainError> {
    let mut files = match run_dir {
        Some(d) => Some(RunFiles::create(d, &metrics, &snapshots)?),
        None => None,
    };
    let spec = store.spec.clone();
    let opts = cfg.objective();
    let trajectories: Vec<&Trajectory> = dataset.trajectories().collect();
    while store.step < cfg.steps {
        let step = store.step;
        let lr = lr_schedule(step, cfg.lr, &cfg.lr_milestones, cfg.lr_factor);
        let ids = minibatch_indices(cfg.seed, step, trajectories.len(), cfg.batch_size);
        let picked: Vec<&Trajectory> = ids.iter().map(|&i| trajectories[i]).collect();
        let ep_ids: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
        let batch = Batch::new(&spec, &picked, &ep_ids)?;
        let graph = cmi.binarized();

        let mut g = Graph::new();
        let outcome = total_objective(&mut g, &store, &batch, &graph, &opts, cfg.seed, step)
            .and_then(|obj| {
                g.backward(obj.total)?;
                Ok(obj)
            });
        let obj = match outcome {
            Ok(o) => o,
            Err(ObjectiveError::NonFinite(detail)) => return Err(abort(run_dir, &store, &cmi, dataset, step, detail)),
            Err(e) => return Err(e.into()),
        };
        let grads = obj.params.grads(&g);
        if let Some(bad) = grads.keys().find(|n| !ParameterStore::is_trainable(n)) {
            return Err(TrainError::Config(format!("optimizer was handed detached tensor `{bad}`")));
        }
        match adam_step(&mut store.tensors, &grads, &mut store.adam, lr) {
            Ok(()) => {}
            Err(NumError::NonFiniteGradient(name)) => {
                return Err(abort(run_dir, &store, &cmi, dataset, step, format!("gradient of `{name}`")))
            }
            Err(e) => return Err(e.into()),
        }
        if cfg.sync_target {
            store.sync_target();
        }
        store.step += 1;
        let done = store.step;
        let row = MetricsRow::new(done, lr, &obj.breakdown);
        if let Some(f) = files.as_mut() {
            f.metrics.serialize(&row)?;
        }
        metrics.push(row);

        if done % cfg.cmi_period == 0 {
            let fresh = estimate_cmi(&store, &batch, cfg.seed, done)?;
            cmi.update_ema(&fresh)?;
            let snap = CmiSnapshot {
                step: done,
                threshold: cmi.threshold,
                fresh,
                values: cmi.values.clone(),
                binarized: cmi.binarized(),
            };
            if let Some(f) = files.as_mut() {
                f.metrics.flush().map_err(io(&f.dir))?;
                f.snapshot(&snap)?;
            }
            info!(
                "step {done}: total {:.4} full_nll {:.4} full_kl {:.4} reward {:.4} edges {}",
                obj.breakdown.total,
                obj.breakdown.full_nll,
                obj.breakdown.full_kl,
                obj.breakdown.reward_ce,
                snap.binarized.iter().flatten().filter(|&&b| b == 1).count()
            );
            snapshots.push(snap);
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                save_run_checkpoint(&dir.join(CHECKPOINT_DIR), &store, &cmi, dataset)?;
            }
        }
    }
    if let Some(dir) = run_dir {
        let f = files.as_mut().expect("files exist with a run dir");
        f.metrics.flush().map_err(io(dir))?;
        f.cmi.flush().map_err(io(dir))?;
        save_run_checkpoint(&dir.join(CHECKPOINT_DIR), &store, &cmi, dataset)?;
        write_json(
            &dir.join(GRAPH_FILE),
            &FinalGraph {
                step: store.step,
                threshold: cmi.threshold,
                values: cmi.values.clone(),
                binarized: cmi.binarized(),
            },
        )?;
    }
    Ok(TrainOutcome {
        store,
        cmi,
        metrics,
        snapshots,
    })
}

fn abort(
    run_dir: Option<&Path>,
    store: &ParameterStore,
    cmi: &CmiMatrix,
    dataset: &Dataset,
    step: u64,
    detail: String,
) -> TrainError {
    if let Some(dir) = run_dir {
        if let Err(e) = save_run_checkpoint(&dir.join(ABORT_DIR), store, cmi, dataset) {
            warn!("could not write abort checkpoint: {e}");
        }
    }
    TrainError::NonFinite { step, detail }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, EnvConfig, NoiseTarget, RandomInterventionPolicy};
    use crate::models::EncoderVariant;

    fn small(encoder: EncoderVariant) -> TrainConfig {
        TrainConfig {
            encoder,
            steps: 6,
            batch_size: 4,
            cmi_period: 3,
            feature_dim: 8,
            mlp_width: 8,
            recurrent_dim: 8,
            ..Default::default()
        }
    }

    fn data() -> Dataset {
        generate_dataset(&EnvConfig::chain3(NoiseTarget::Hidden), &RandomInterventionPolicy, 20, 1, 1).unwrap()
    }

    #[test]
    fn same_seed_same_metrics_files() {
        let ds = data();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&small(EncoderVariant::DvaeFull), &ds, Some(a.path())).unwrap();
        train(&small(EncoderVariant::DvaeFull), &ds, Some(b.path())).unwrap();
        for f in [METRICS_FILE, CMI_HISTORY_FILE, GRAPH_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let rows = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(read_snapshots(a.path()).unwrap().len(), 2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let ds = data();
        let full = train(&small(EncoderVariant::Dvae1Step), &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut first = small(EncoderVariant::Dvae1Step);
        first.steps = 4;
        train(&first, &ds, Some(dir.path())).unwrap();
        let resumed = resume(&small(EncoderVariant::Dvae1Step), &ds, dir.path()).unwrap();
        assert_eq!(resumed.metrics, full.metrics);
        assert_eq!(resumed.store, full.store);
        assert_eq!(resumed.cmi, full.cmi);
        // Zero remaining steps changes nothing.
        let again = resume(&small(EncoderVariant::Dvae1Step), &ds, dir.path()).unwrap();
        assert_eq!(again.store, full.store);
    }

    #[test]
    fn target_tracks_previous_step() {
        let ds = data();
        let mut cfg = small(EncoderVariant::History);
        cfg.steps = 2;
        let out = train(&cfg, &ds, None).unwrap();
        for (name, t) in out.store.group("phi/") {
            assert_eq!(t, &out.store.tensors[&format!("phi_bar/{}", &name[4..])]);
        }
        cfg.sync_target = false;
        let frozen = train(&cfg, &ds, None).unwrap();
        let init = ParameterStore::new(cfg.model_spec(&ds.header.config), cfg.seed);
        for (name, t) in frozen.store.group("phi_bar/") {
            assert_eq!(t, &init.tensors[name]);
        }
    }

    #[test]
    fn rejects_tampered_dataset() {
        let mut ds = data();
        ds.header.config_hash = "0".repeat(64);
        assert!(matches!(train(&small(EncoderVariant::History), &ds, None), Err(TrainError::Dataset(_))));
    }

    #[test]
    fn minibatches_depend_only_on_seed_and_step() {
        assert_eq!(minibatch_indices(3, 10, 100, 8), minibatch_indices(3, 10, 100, 8));
        assert_ne!(minibatch_indices(3, 10, 100, 8), minibatch_indices(3, 11, 100, 8));
        assert!(minibatch_indices(0, 0, 5, 50).iter().all(|&i| i < 5));
    }
}

//! JSON-lines dataset files: one header line, then one episode per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvConfig, EnvError, Episode, GroundTruth, ModuloEnv, Policy, Trajectory};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: EnvConfig,
    pub config_hash: String,
    pub gt_graph: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    o: Vec<Vec<usize>>,
    a: Vec<Vec<u8>>,
    tau: usize,
    r: Vec<u8>,
    gt_h: Vec<Vec<usize>>,
    gt_eps: Vec<Vec<i8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter().map(|e| &e.trajectory)
    }
}

/// Rolls out `n_episodes` episodes, each from its own `(seed, index)` stream.
///
/// `workers` only changes wall-clock time; the output is identical for any value.
pub fn generate_dataset<P: Policy + ?Sized>(
    cfg: &EnvConfig,
    policy: &P,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<Dataset, EnvError> {
    if n_episodes == 0 {
        return Err(EnvError::InvalidConfig("n_episodes must be positive".into()));
    }
    let env = ModuloEnv::new(cfg.clone())?;
    let workers = workers.clamp(1, n_episodes);
    let chunk = n_episodes.div_ceil(workers);
    let episodes = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let env = &env;
                scope.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(n_episodes))
                        .map(|e| env.rollout_indexed(policy, seed, e as u64))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            gt_graph: env.ground_truth_graph().0,
        },
        episodes,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnvError + '_ {
    move |source| EnvError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), EnvError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let json = |e: serde_json::Error| EnvError::Dataset(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&ds.header).map_err(json)?).map_err(io_err(path))?;
    for ep in &ds.episodes {
        let tr = &ep.trajectory;
        let gt = ep.ground_truth();
        let rec = EpisodeRecord {
            o: tr.observations.clone(),
            a: tr.actions.clone(),
            tau: tr.tau,
            r: tr.rewards.clone(),
            gt_h: gt.hiddens.clone(),
            gt_eps: gt.noise.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(json)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, EnvError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| EnvError::Dataset(format!("{} is empty", path.display())))?
        .map_err(io_err(path))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| EnvError::Dataset(format!("header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(EnvError::Dataset(format!("unsupported dataset version {}", header.version)));
    }
    if header.config.hash() != header.config_hash {
        return Err(EnvError::Dataset("header config hash does not match its config".into()));
    }
    header.config.validate()?;
    let (t, d_o, d_h, d_s) = (
        header.config.horizon,
        header.config.n_observed(),
        header.config.n_hidden(),
        header.config.n_factors,
    );
    let mut episodes = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| EnvError::Dataset(format!("episode {k}: {e}")))?;
        let ok = rec.o.len() == t + 1
            && rec.o.iter().all(|r| r.len() == d_o)
            && rec.a.len() == t
            && rec.a.iter().all(|r| r.len() == d_s)
            && rec.r.len() == t
            && rec.gt_h.len() == t + 1
            && rec.gt_h.iter().all(|r| r.len() == d_h)
            && rec.gt_eps.len() == t;
        if !ok {
            return Err(EnvError::Dataset(format!("episode {k} has inconsistent lengths")));
        }
        episodes.push(Episode::new(
            Trajectory {
                observations: rec.o,
                actions: rec.a,
                tau: rec.tau,
                rewards: rec.r,
            },
            GroundTruth {
                hiddens: rec.gt_h,
                noise: rec.gt_eps,
            },
        ));
    }
    Ok(Dataset { header, episodes })
}

//! Post-training evaluation: prediction accuracies, the linear hidden-decoding
//! probe, seed aggregation and figure export.

mod heatmap;
mod probe;
mod report;

pub use heatmap::{factor_labels, render_heatmap, write_heatmaps};
pub use probe::{fit_probe, ProbeInput, ProbeResult};
pub use report::{aggregate, export_report, read_tables, EvalReport, MeanStd, RunMetrics, REPORT_FILE, TABLES_FILE};

use thiserror::Error;

use crate::env::{Episode, TransitionGraphGT};
use crate::graph::{graph_accuracy, GraphError};
use crate::models::{
    predict_reward, unroll_encoder, Batch, GumbelStreams, InputMask, ModelError, ParameterStore, PrevHidden,
    TransitionModel,
};
use crate::numcore::{Graph, Tensor};
use crate::objective::{stack_time, transition_inputs, ObjectiveError, PURPOSE_EVAL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report format: {0}")]
    Format(String),
}

/// Episodes per forward pass.
const CHUNK: usize = 256;

/// Accuracies of the trained predictors under full inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionAccuracy {
    /// One entry per observed factor, in factor order.
    pub observed: Vec<f64>,
    /// One entry per hidden factor: `argmax p_θh` vs `argmax q_φ̄` at `t + 1`.
    pub hidden: Vec<f64>,
    pub reward: f64,
    pub transitions: usize,
}

/// Encoder outputs of one chunk, read back as plain values.
struct Encoded {
    batch: Batch,
    /// `logits[t][k]`, `[m, l]`.
    logits: Vec<Vec<Tensor>>,
    /// Sampled class per `[t][k][e]`.
    samples: Vec<Vec<Vec<usize>>>,
}

fn chunks(store: &ParameterStore, episodes: &[Episode]) -> Result<Vec<Batch>, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Invalid("no evaluation episodes".into()));
    }
    episodes
        .chunks(CHUNK)
        .enumerate()
        .map(|(c, eps)| {
            let trs: Vec<_> = eps.iter().map(|e| &e.trajectory).collect();
            let ids: Vec<u64> = (0..eps.len()).map(|i| (c * CHUNK + i) as u64).collect();
            Ok(Batch::new(&store.spec, &trs, &ids)?)
        })
        .collect()
}

/// Encodes `batch` with `φ̄`, drawing samples from the evaluation stream.
fn encode(g: &mut Graph, store: &ParameterStore, batch: Batch, seed: u64) -> Result<(Encoded, Vec<Vec<crate::numcore::Var>>), EvalError> {
    let p = store.bind_target_encoder(g)?;
    let streams = GumbelStreams {
        seed,
        step: 0,
        purpose: PURPOSE_EVAL,
    };
    let out = unroll_encoder(g, &p, &store.spec, &batch, PrevHidden::Recursive, Some(&streams))?;
    let logits = out
        .logits
        .iter()
        .map(|ks| ks.iter().map(|&v| g.value(v).clone()).collect())
        .collect();
    let samples = out
        .samples
        .iter()
        .map(|ks| ks.iter().map(|&v| g.value(v).argmax_rows()).collect())
        .collect();
    Ok((
        Encoded {
            batch,
            logits,
            samples,
        },
        out.samples,
    ))
}

/// Observed, hidden and reward prediction accuracy on `episodes`.
pub fn prediction_accuracies(
    store: &ParameterStore,
    episodes: &[Episode],
    seed: u64,
) -> Result<PredictionAccuracy, EvalError> {
    let spec = &store.spec;
    let n = spec.n_factors;
    let mut hits = vec![0usize; n];
    let (mut reward_hits, mut rows, mut reward_rows) = (0usize, 0usize, 0usize);
    for batch in chunks(store, episodes)? {
        let mut g = Graph::new();
        let (enc, sample_vars) = encode(&mut g, store, batch, seed)?;
        let batch = &enc.batch;
        let p = store.bind(&mut g, crate::models::EncoderSource::Target, false)?;
        let inputs = transition_inputs(&mut g, spec, batch, &sample_vars)?;
        let model = TransitionModel::new(spec, &p);
        let full = InputMask::full(n);
        for (j, hit) in hits.iter_mut().enumerate() {
            let logits = model.forward(&mut g, j, &inputs, &full)?;
            let pred = g.value(logits).argmax_rows();
            let actual: Vec<usize> = if spec.is_hidden(j) {
                let k = role_index(spec, j);
                (1..=batch.horizon)
                    .flat_map(|t| enc.logits[t][k].argmax_rows())
                    .collect()
            } else {
                batch.stacked_obs(role_index(spec, j), 1)
            };
            *hit += pred.iter().zip(&actual).filter(|(a, b)| a == b).count();
        }
        rows += batch.transition_rows();
        let hidden = (0..spec.n_hidden())
            .map(|k| stack_time(&mut g, &sample_vars, k, 1, batch.horizon))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let tau = g.constant(batch.stacked_tau(spec.n_categories)).map_err(ModelError::from)?;
        let logits = predict_reward(&mut g, &p, spec, &hidden, tau)?;
        let pred = g.value(logits).argmax_rows();
        let actual = batch.stacked_rewards();
        reward_hits += pred.iter().zip(&actual).filter(|(a, b)| a == b).count();
        reward_rows += actual.len();
    }
    let acc = |h: usize| h as f64 / rows as f64;
    Ok(PredictionAccuracy {
        observed: spec.observed_indices().iter().map(|&j| acc(hits[j])).collect(),
        hidden: spec.hidden_indices.iter().map(|&j| acc(hits[j])).collect(),
        reward: reward_hits as f64 / reward_rows as f64,
        transitions: rows,
    })
}

/// Probe features and ground-truth labels for every `(episode, t)`, one set
/// per hidden factor. Features are all hidden factors' logits (or one-hot
/// samples) concatenated.
pub fn probe_data(
    store: &ParameterStore,
    episodes: &[Episode],
    input: ProbeInput,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>), EvalError> {
    let spec = &store.spec;
    let (l, d_h) = (spec.n_categories, spec.n_hidden());
    let mut feats = Vec::new();
    let mut labels = vec![Vec::new(); d_h];
    let mut offset = 0;
    for batch in chunks(store, episodes)? {
        let mut g = Graph::new();
        let m = batch.m;
        let (enc, _) = encode(&mut g, store, batch, seed)?;
        for t in 0..=enc.batch.horizon {
            for e in 0..m {
                let ep = &episodes[offset + e];
                let gt = ep.ground_truth();
                let mut row = Vec::with_capacity(d_h * l);
                for k in 0..d_h {
                    match input {
                        ProbeInput::Logits => row.extend_from_slice(enc.logits[t][k].row(e)),
                        ProbeInput::Samples => {
                            row.extend((0..l).map(|c| f64::from(u8::from(enc.samples[t][k][e] == c))))
                        }
                    }
                    labels[k].push(gt.hiddens[t][k]);
                }
                feats.push(row);
            }
        }
        offset += m;
    }
    Ok((feats, labels))
}

/// Held-out accuracy of a linear-softmax probe from encoder outputs to each
/// ground-truth hidden factor (80/20 split of timesteps).
pub fn hidden_decoding_accuracy(
    store: &ParameterStore,
    episodes: &[Episode],
    input: ProbeInput,
    seed: u64,
) -> Result<Vec<ProbeResult>, EvalError> {
    let (feats, labels) = probe_data(store, episodes, input, seed)?;
    labels
        .iter()
        .map(|y| fit_probe(&feats, y, store.spec.n_categories, seed))
        .collect()
}

/// Every per-run metric.
pub fn evaluate_run(
    store: &ParameterStore,
    binarized: &[Vec<u8>],
    gt: &TransitionGraphGT,
    episodes: &[Episode],
    seed: u64,
) -> Result<RunMetrics, EvalError> {
    let pred = prediction_accuracies(store, episodes, seed)?;
    let probes = hidden_decoding_accuracy(store, episodes, ProbeInput::Logits, seed)?;
    Ok(RunMetrics {
        seed,
        graph_accuracy: graph_accuracy(binarized, gt)?,
        hidden_decoding: probes.iter().map(|p| p.accuracy).collect(),
        degenerate_probe: probes.iter().any(|p| p.degenerate),
        observation_prediction: pred.observed,
        hidden_prediction: pred.hidden,
        reward_prediction: pred.reward,
    })
}

fn role_index(spec: &crate::models::ModelSpec, factor: usize) -> usize {
    (0..factor).filter(|&f| spec.is_hidden(f) == spec.is_hidden(factor)).count()
}

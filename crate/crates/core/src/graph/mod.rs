//! Causal graph learning from conditional mutual information.
//!
//! For a parent candidate `i` (a state factor or the action node `d_S`) and a
//! next-step factor `j`, the CMI estimate compares the transition model with
//! all inputs to the one with input `i` masked out:
//!
//! * observed `j`: batch mean of `log p(o^j_{t+1} | s_t, a_t) − log p(o^j_{t+1} | s_t \ s^i_t, a_t)`,
//!   clamped at zero;
//! * hidden `j`: batch mean of `KL(p(·| s_t, a_t) ‖ p(·| s_t \ s^i_t, a_t))`.
//!
//! Estimates are smoothed with an exponential moving average and thresholded
//! at `δ` to give the binarized `(d_S + 1) × d_S` graph.

mod oracle;

pub use oracle::{enumeration_cmi, TabularTransition};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::TransitionGraphGT;
use crate::models::{
    unroll_encoder, Batch, GumbelStreams, InputMask, ModelError, ParameterStore, PrevHidden, TransitionInputs,
    TransitionModel,
};
use crate::numcore::{Graph, Tensor};
use crate::objective::PURPOSE_CMI;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// EMA-smoothed CMI estimates, rows = parents (factors then action), columns = children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiMatrix {
    pub values: Vec<Vec<f64>>,
    pub ema_coeff: f64,
    pub threshold: f64,
}

impl CmiMatrix {
    /// Every entry starts at `threshold`, so the initial graph is fully connected.
    pub fn new(n_factors: usize, threshold: f64, ema_coeff: f64) -> Result<Self, GraphError> {
        if !(threshold > 0.0) || !(0.0..1.0).contains(&ema_coeff) {
            return Err(GraphError::Invalid(format!(
                "threshold must be > 0 and ema_coeff in [0, 1); got {threshold}, {ema_coeff}"
            )));
        }
        Ok(Self {
            values: vec![vec![threshold; n_factors]; n_factors + 1],
            ema_coeff,
            threshold,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `v ← c·v + (1 − c)·fresh`, with negative fresh values clamped to zero.
    pub fn update_ema(&mut self, fresh: &[Vec<f64>]) -> Result<(), GraphError> {
        if fresh.len() != self.values.len() || fresh.iter().any(|r| r.len() != self.n_factors()) {
            return Err(GraphError::Shape(format!(
                "fresh CMI must be {} x {}",
                self.values.len(),
                self.n_factors()
            )));
        }
        if fresh.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GraphError::Invalid("non-finite CMI estimate".into()));
        }
        let c = self.ema_coeff;
        for (row, new) in self.values.iter_mut().zip(fresh) {
            for (v, &x) in row.iter_mut().zip(new) {
                *v = c * *v + (1.0 - c) * x.max(0.0);
            }
        }
        Ok(())
    }

    pub fn binarized(&self) -> Vec<Vec<u8>> {
        binarize(&self.values, self.threshold)
    }
}

/// `1` where `value ≥ δ`.
pub fn binarize(values: &[Vec<f64>], delta: f64) -> Vec<Vec<u8>> {
    values
        .iter()
        .map(|r| r.iter().map(|&v| u8::from(v >= delta)).collect())
        .collect()
}

/// Fraction of matching cells.
pub fn graph_accuracy(binarized: &[Vec<u8>], gt: &TransitionGraphGT) -> Result<f64, GraphError> {
    let g = &gt.0;
    if binarized.len() != g.len() || binarized.iter().zip(g).any(|(a, b)| a.len() != b.len()) {
        return Err(GraphError::Shape("graph and ground truth differ in shape".into()));
    }
    let cells: usize = g.iter().map(Vec::len).sum();
    let hits = binarized
        .iter()
        .zip(g)
        .flat_map(|(a, b)| a.iter().zip(b))
        .filter(|(x, y)| (**x != 0) == (**y != 0))
        .count();
    Ok(hits as f64 / cells as f64)
}

/// Discrete transitions on which CMI is evaluated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionSample {
    /// `[rows][d_S]` full state at `t` (hidden entries are sampled or true values).
    pub states: Vec<Vec<usize>>,
    /// `[rows][d_S]` action bits at `t`.
    pub actions: Vec<Vec<u8>>,
    /// `[rows][d_S]` state at `t + 1`; hidden entries are unused.
    pub next: Vec<Vec<usize>>,
}

impl TransitionSample {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// A conditional model `p(s^j_{t+1} | inputs)` that can mask single inputs.
pub trait TransitionDistribution {
    fn n_factors(&self) -> usize;
    fn is_hidden(&self, j: usize) -> bool;

    /// Log-probabilities of next factor `j` for every row, under the full
    /// mask (index 0) and leave-one-out of input `i` (index `1 + i`, for
    /// `i = 0 … d_S`). Shape `[d_S + 2][rows][l]`.
    fn log_probs(&self, j: usize, sample: &TransitionSample) -> Result<Vec<Vec<Vec<f64>>>, GraphError>;
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

fn column(lp: &[Vec<Vec<f64>>], sample: &TransitionSample, j: usize, hidden: bool) -> Vec<f64> {
    let rows = sample.len().max(1) as f64;
    let full = &lp[0];
    (1..lp.len())
        .map(|m| {
            let masked = &lp[m];
            let total: f64 = if hidden {
                full.iter().zip(masked).map(|(p, q)| kl_rows(p, q)).sum()
            } else {
                full.iter()
                    .zip(masked)
                    .zip(&sample.next)
                    .map(|((p, q), nx)| p[nx[j]] - q[nx[j]])
                    .sum()
            };
            // Only the observed estimator can go negative; KL is clamped for rounding.
            (total / rows).max(0.0)
        })
        .collect()
}

/// CMI of input `i` on observed target `j`.
pub fn cmi_observed<M: TransitionDistribution + ?Sized>(
    model: &M,
    sample: &TransitionSample,
    i: usize,
    j: usize,
) -> Result<f64, GraphError> {
    if model.is_hidden(j) {
        return Err(GraphError::Invalid(format!("factor {j} is hidden")));
    }
    Ok(column(&model.log_probs(j, sample)?, sample, j, false)[i])
}

/// CMI of input `i` on hidden target `j`.
pub fn cmi_hidden<M: TransitionDistribution + ?Sized>(
    model: &M,
    sample: &TransitionSample,
    i: usize,
    j: usize,
) -> Result<f64, GraphError> {
    if !model.is_hidden(j) {
        return Err(GraphError::Invalid(format!("factor {j} is observed")));
    }
    Ok(column(&model.log_probs(j, sample)?, sample, j, true)[i])
}

/// Every `(i, j)` estimate as a `(d_S + 1) × d_S` matrix.
pub fn cmi_matrix<M: TransitionDistribution + ?Sized>(
    model: &M,
    sample: &TransitionSample,
) -> Result<Vec<Vec<f64>>, GraphError> {
    if sample.is_empty() {
        return Err(GraphError::Invalid("empty transition sample".into()));
    }
    let n = model.n_factors();
    let mut out = vec![vec![0.0; n]; n + 1];
    for j in 0..n {
        let col = column(&model.log_probs(j, sample)?, sample, j, model.is_hidden(j));
        for (i, v) in col.into_iter().enumerate() {
            out[i][j] = v;
        }
    }
    Ok(out)
}

/// The learned transition model of a parameter store.
pub struct NeuralTransition<'a> {
    pub store: &'a ParameterStore,
}

impl TransitionDistribution for NeuralTransition<'_> {
    fn n_factors(&self) -> usize {
        self.store.spec.n_factors
    }

    fn is_hidden(&self, j: usize) -> bool {
        self.store.spec.is_hidden(j)
    }

    fn log_probs(&self, j: usize, sample: &TransitionSample) -> Result<Vec<Vec<Vec<f64>>>, GraphError> {
        let spec = &self.store.spec;
        let (n, l, rows) = (spec.n_factors, spec.n_categories, sample.len());
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, crate::models::EncoderSource::Target, false)?;
        let factors = (0..n)
            .map(|f| {
                let ids: Vec<usize> = sample.states.iter().map(|s| s[f]).collect();
                Tensor::one_hot(&ids, l)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let act: Vec<f64> = sample.actions.iter().flat_map(|a| a.iter().map(|&b| b as f64)).collect();
        let action = Tensor::matrix(rows, n, act).map_err(ModelError::from)?;
        let inputs = TransitionInputs::from_tensors(&mut g, factors, action)?;
        let model = TransitionModel::new(spec, &p);
        let feats = model.features(&mut g, j, &inputs)?;
        let mut masks = vec![InputMask::full(n).tile(rows)];
        for i in 0..=n {
            masks.push(InputMask::leave_one_out(n, i)?.tile(rows));
        }
        let logits = model.forward_multi(&mut g, j, &feats, &masks)?;
        Ok(logits
            .into_iter()
            .map(|lg| {
                let lp = g.log_softmax(lg);
                g.value(lp).data().chunks(l).map(<[f64]>::to_vec).collect()
            })
            .collect())
    }
}

/// Transitions of `batch` with hidden factors drawn recursively from the
/// detached encoder `φ̄` (noise purpose [`PURPOSE_CMI`]).
pub fn sample_transitions(
    store: &ParameterStore,
    batch: &Batch,
    seed: u64,
    step: u64,
) -> Result<TransitionSample, GraphError> {
    let spec = &store.spec;
    let mut g = Graph::new();
    let p = store.bind_target_encoder(&mut g)?;
    let streams = GumbelStreams {
        seed,
        step,
        purpose: PURPOSE_CMI,
    };
    let enc = unroll_encoder(&mut g, &p, spec, batch, PrevHidden::Recursive, Some(&streams))?;
    let hidden_at = |t: usize, k: usize, e: usize| -> usize {
        let v = g.value(enc.samples[t][k]);
        let row = v.row(e);
        row.iter().position(|&x| x == 1.0).unwrap_or(0)
    };
    let state_at = |t: usize, e: usize| -> Vec<usize> {
        let (mut ko, mut kh) = (0, 0);
        (0..spec.n_factors)
            .map(|f| {
                if spec.is_hidden(f) {
                    kh += 1;
                    hidden_at(t, kh - 1, e)
                } else {
                    ko += 1;
                    batch.obs[t][ko - 1][e]
                }
            })
            .collect()
    };
    let mut out = TransitionSample::default();
    for t in 0..batch.horizon {
        for e in 0..batch.m {
            out.states.push(state_at(t, e));
            out.next.push(state_at(t + 1, e));
            out.actions.push(batch.actions[t].row(e).iter().map(|&a| a as u8).collect());
        }
    }
    Ok(out)
}

/// Fresh CMI estimates of the neural model on one batch.
pub fn estimate_cmi(store: &ParameterStore, batch: &Batch, seed: u64, step: u64) -> Result<Vec<Vec<f64>>, GraphError> {
    let sample = sample_transitions(store, batch, seed, step)?;
    cmi_matrix(&NeuralTransition { store }, &sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, ModuloEnv, NoiseTarget};

    #[test]
    fn initial_matrix_is_fully_connected() {
        let m = CmiMatrix::new(3, 0.03, 0.9).unwrap();
        assert!(m.binarized().iter().flatten().all(|&b| b == 1));
    }

    #[test]
    fn ema_with_zero_coefficient_copies_fresh() {
        let mut m = CmiMatrix::new(2, 0.03, 0.0).unwrap();
        let fresh = vec![vec![0.5, -1.0], vec![0.0, 2.0], vec![0.01, 0.03]];
        m.update_ema(&fresh).unwrap();
        assert_eq!(m.values, vec![vec![0.5, 0.0], vec![0.0, 2.0], vec![0.01, 0.03]]);
        assert_eq!(m.binarized(), vec![vec![1, 0], vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut m = CmiMatrix::new(1, 0.03, 0.9).unwrap();
        for _ in 0..300 {
            m.update_ema(&[vec![0.7], vec![0.0]]).unwrap();
        }
        assert!((m.values[0][0] - 0.7).abs() < 1e-6);
        assert!(m.values[1][0] < 1e-6);
    }

    #[test]
    fn rejects_bad_shapes_and_settings() {
        let mut m = CmiMatrix::new(2, 0.03, 0.9).unwrap();
        assert!(m.update_ema(&vec![vec![0.0; 2]; 2]).is_err());
        assert!(m.update_ema(&[vec![f64::NAN, 0.0], vec![0.0; 2], vec![0.0; 2]]).is_err());
        assert!(CmiMatrix::new(2, 0.0, 0.9).is_err());
        assert!(CmiMatrix::new(2, 0.03, 1.0).is_err());
    }

    #[test]
    fn accuracy_counts_cells() {
        let gt = ModuloEnv::new(EnvConfig::chain3(NoiseTarget::Hidden)).unwrap().ground_truth_graph();
        assert_eq!(graph_accuracy(&gt.0, &gt).unwrap(), 1.0);
        let mut one_off = gt.0.clone();
        one_off[0][2] ^= 1;
        assert!((graph_accuracy(&one_off, &gt).unwrap() - 11.0 / 12.0).abs() < 1e-12);
        assert!(graph_accuracy(&gt.0[..3], &gt).is_err());
    }

    #[test]
    fn raising_threshold_never_adds_edges() {
        let values = vec![vec![0.01, 0.5], vec![0.03, 0.2], vec![0.0, 0.04]];
        let mut prev = binarize(&values, 0.0);
        for d in [0.01, 0.02, 0.03, 0.05, 0.3, 1.0] {
            let b = binarize(&values, d);
            assert!(b.iter().flatten().zip(prev.iter().flatten()).all(|(x, y)| x <= y));
            prev = b;
        }
    }

    /// A model whose predictions ignore every input.
    struct Constant;

    impl TransitionDistribution for Constant {
        fn n_factors(&self) -> usize {
            2
        }
        fn is_hidden(&self, j: usize) -> bool {
            j == 1
        }
        fn log_probs(&self, _j: usize, s: &TransitionSample) -> Result<Vec<Vec<Vec<f64>>>, GraphError> {
            let row = vec![0.1f64.ln(), 0.9f64.ln()];
            Ok(vec![vec![row; s.len()]; 4])
        }
    }

    #[test]
    fn input_free_model_has_zero_cmi() {
        let s = TransitionSample {
            states: vec![vec![0, 1], vec![1, 0]],
            actions: vec![vec![1, 0], vec![0, 0]],
            next: vec![vec![1, 1], vec![0, 0]],
        };
        let m = cmi_matrix(&Constant, &s).unwrap();
        assert!(m.iter().flatten().all(|&v| v == 0.0));
        assert!(cmi_observed(&Constant, &s, 0, 1).is_err());
        assert_eq!(cmi_hidden(&Constant, &s, 2, 1).unwrap(), 0.0);
    }
}

//! Factor-wise masked transition model.
//!
//! For each next-step factor `j`, every input (the `d_S` state factors and the
//! action node) passes through its own `linear + tanh` extractor. The features
//! of the unmasked inputs are combined by an elementwise max and a shared head
//! maps the result to `l` logits. A masked input cannot influence the output.

use crate::numcore::{Graph, Tensor, Var};

use super::layers::{linear, mlp, MLP_LAYERS};
use super::params::{transition_prefix, Bound};
use super::{ModelError, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    LeaveOneOut(usize),
    Causal,
}

/// Active inputs over the `d_S` factors plus the action node (last entry).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputMask {
    pub kind: MaskKind,
    pub active: Vec<bool>,
}

impl InputMask {
    pub fn full(n_factors: usize) -> Self {
        Self {
            kind: MaskKind::Full,
            active: vec![true; n_factors + 1],
        }
    }

    pub fn leave_one_out(n_factors: usize, i: usize) -> Result<Self, ModelError> {
        if i > n_factors {
            return Err(ModelError::Input(format!("leave-one-out index {i} exceeds {n_factors}")));
        }
        let mut active = vec![true; n_factors + 1];
        active[i] = false;
        Ok(Self {
            kind: MaskKind::LeaveOneOut(i),
            active,
        })
    }

    /// Parents of one target as a column of a `(d_S + 1) × d_S` graph.
    pub fn causal(parents: &[bool]) -> Result<Self, ModelError> {
        if !parents.iter().any(|&p| p) {
            return Err(ModelError::Input("causal mask has no active input".into()));
        }
        Ok(Self {
            kind: MaskKind::Causal,
            active: parents.to_vec(),
        })
    }

    /// The mask repeated for `rows` rows, row-major.
    pub fn tile(&self, rows: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(rows * self.active.len());
        for _ in 0..rows {
            out.extend_from_slice(&self.active);
        }
        out
    }
}

/// Stacked inputs for `rows` transitions.
#[derive(Clone, Debug)]
pub struct TransitionInputs {
    /// One `[rows, l]` (one-hot or relaxed) tensor per state factor.
    pub factors: Vec<Var>,
    /// `[rows, d_S]` action bits.
    pub action: Var,
}

impl TransitionInputs {
    pub fn rows(&self, g: &Graph) -> usize {
        g.shape(self.action)[0]
    }

    pub fn from_tensors(g: &mut Graph, factors: Vec<Tensor>, action: Tensor) -> Result<Self, ModelError> {
        let factors = factors.into_iter().map(|t| g.constant(t)).collect::<Result<_, _>>()?;
        Ok(Self {
            factors,
            action: g.constant(action)?,
        })
    }
}

/// The transition networks bound to one graph.
pub struct TransitionModel<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a Bound,
}

impl<'a> TransitionModel<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a Bound) -> Self {
        Self { spec, params }
    }

    /// Per-input features for target `j`, `d_S + 1` tensors of `[rows, F]`.
    pub fn features(&self, g: &mut Graph, j: usize, inputs: &TransitionInputs) -> Result<Vec<Var>, ModelError> {
        let n = self.spec.n_factors;
        if inputs.factors.len() != n || j >= n {
            return Err(ModelError::Input(format!(
                "transition for target {j} needs {n} factor inputs, got {}",
                inputs.factors.len()
            )));
        }
        let pre = transition_prefix(self.spec, j);
        let mut out = Vec::with_capacity(n + 1);
        for (i, &x) in inputs.factors.iter().chain(std::iter::once(&inputs.action)).enumerate() {
            let h = linear(g, self.params, &format!("{pre}/in{i}"), x)?;
            out.push(g.tanh(h));
        }
        Ok(out)
    }

    /// Logits for target `j` under several row-wise masks in one head pass.
    ///
    /// Each entry of `masks` is a row-major `rows × (d_S + 1)` boolean
    /// matrix; the result has one `[rows, l]` logits tensor per entry.
    pub fn forward_multi(
        &self,
        g: &mut Graph,
        j: usize,
        features: &[Var],
        masks: &[Vec<bool>],
    ) -> Result<Vec<Var>, ModelError> {
        let k = self.spec.n_factors + 1;
        if features.len() != k || masks.is_empty() {
            return Err(ModelError::Input("forward_multi needs d_S + 1 features and at least one mask".into()));
        }
        let rows = g.shape(features[0])[0];
        if let Some(bad) = masks.iter().find(|m| m.len() != rows * k) {
            return Err(ModelError::Input(format!("mask has {} entries, expected {}", bad.len(), rows * k)));
        }
        let b = masks.len();
        let parts: Vec<Var> = if b == 1 {
            features.to_vec()
        } else {
            features
                .iter()
                .map(|&f| g.concat(&vec![f; b], 0))
                .collect::<Result<_, _>>()?
        };
        let mask: Vec<bool> = masks.concat();
        let pooled = g.masked_max(&parts, &mask)?;
        let pre = transition_prefix(self.spec, j);
        let logits = mlp(g, self.params, &format!("{pre}/head"), MLP_LAYERS, pooled)?;
        if b == 1 {
            return Ok(vec![logits]);
        }
        (0..b)
            .map(|s| g.slice(logits, 0, s * rows, rows).map_err(ModelError::from))
            .collect()
    }

    /// Logits for target `j` under one mask applied to every row.
    pub fn forward(
        &self,
        g: &mut Graph,
        j: usize,
        inputs: &TransitionInputs,
        mask: &InputMask,
    ) -> Result<Var, ModelError> {
        let feats = self.features(g, j, inputs)?;
        let rows = inputs.rows(g);
        Ok(self.forward_multi(g, j, &feats, &[mask.tile(rows)])?[0])
    }
}

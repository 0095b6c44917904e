//! Training objective: six factorized VLB terms plus the reward loss.
//!
//! For every transition `t = 0 … T-1` and target factor `j`:
//!
//! * observed `j`: negative log-likelihood of `o^j_{t+1}` under the full,
//!   leave-one-out and causal input masks;
//! * hidden `j`: `KL(q_φ̄(h^j_{t+1}) ‖ p_θh(h^j_{t+1} | ·))` under the same
//!   three masks, with the encoder side detached.
//!
//! Hidden inputs are recursive samples of the live encoder `φ`. Every term is a
//! mean over `(episode, t)`; terms of different target factors are summed.
//! The minimized total is the plain sum of the six non-negative terms plus
//! `λ · reward_ce`.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    predict_reward, unroll_encoder, Batch, Bound, EncoderOutput, EncoderSource, GumbelStreams, InputMask, ModelError,
    ModelSpec, ParameterStore, PrevHidden, TransitionInputs, TransitionModel,
};
use crate::numcore::{categorical_kl, cross_entropy, rng, Graph, NumError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("invalid objective setting: {0}")]
    Invalid(String),
}

impl From<NumError> for ObjectiveError {
    fn from(e: NumError) -> Self {
        Self::Model(ModelError::Num(e))
    }
}

/// Gumbel stream purposes.
pub const PURPOSE_TRAIN: u64 = 1;
pub const PURPOSE_CMI: u64 = 2;
pub const PURPOSE_EVAL: u64 = 3;
const MASK_STREAM: u64 = 0x3A5C;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    /// Weight `λ` of the reward loss.
    pub lambda: f64,
    /// Let masked and causal terms backpropagate into the encoder samples.
    pub masked_encoder_grad: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            masked_encoder_grad: true,
        }
    }
}

/// Terms for one target factor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorTerms {
    pub factor: usize,
    pub hidden: bool,
    pub full: f64,
    pub masked: f64,
    pub causal: f64,
    /// The graph column was empty and the causal term used the full mask.
    pub causal_fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub full_nll: f64,
    pub masked_nll: f64,
    pub causal_nll: f64,
    pub full_kl: f64,
    pub masked_kl: f64,
    pub causal_kl: f64,
    pub reward_ce: f64,
    pub total: f64,
    pub per_factor: Vec<FactorTerms>,
}

impl LossBreakdown {
    pub fn vlb_sum(&self) -> f64 {
        self.full_nll + self.masked_nll + self.causal_nll + self.full_kl + self.masked_kl + self.causal_kl
    }

    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("full_nll", self.full_nll),
            ("masked_nll", self.masked_nll),
            ("causal_nll", self.causal_nll),
            ("full_kl", self.full_kl),
            ("masked_kl", self.masked_kl),
            ("causal_kl", self.causal_kl),
            ("reward_ce", self.reward_ce),
            ("total", self.total),
        ]
    }
}

/// Graph nodes of the six VLB terms.
#[derive(Clone, Copy, Debug)]
pub struct VlbVars {
    pub full_nll: Var,
    pub masked_nll: Var,
    pub causal_nll: Var,
    pub full_kl: Var,
    pub masked_kl: Var,
    pub causal_kl: Var,
}

/// Result of [`total_objective`]: the loss node, its parts, and the bound
/// parameters whose gradients the optimizer consumes.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub params: Bound,
}

/// Stacks per-timestep `[m, l]` nodes for `t = t0 … t0 + T - 1`, time-major.
pub fn stack_time(g: &mut Graph, per_t: &[Vec<Var>], k: usize, t0: usize, horizon: usize) -> Result<Var, NumError> {
    let parts: Vec<Var> = (t0..t0 + horizon).map(|t| per_t[t][k]).collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 0)
}

/// Transition inputs for `t = 0 … T-1`: observed one-hots from the batch and
/// hidden factors from `hidden[t][k]`.
pub fn transition_inputs(
    g: &mut Graph,
    spec: &ModelSpec,
    batch: &Batch,
    hidden: &[Vec<Var>],
) -> Result<TransitionInputs, ObjectiveError> {
    let l = spec.n_categories;
    let mut factors = Vec::with_capacity(spec.n_factors);
    let (mut ko, mut kh) = (0, 0);
    for f in 0..spec.n_factors {
        if spec.is_hidden(f) {
            factors.push(stack_time(g, hidden, kh, 0, batch.horizon)?);
            kh += 1;
        } else {
            let t = Tensor::one_hot(&batch.stacked_obs(ko, 0), l)?;
            factors.push(g.constant(t)?);
            ko += 1;
        }
    }
    Ok(TransitionInputs {
        factors,
        action: g.constant(batch.stacked_actions())?,
    })
}

/// Position of `factor` among the observed (or hidden) factors.
fn role_index(spec: &ModelSpec, factor: usize) -> usize {
    (0..factor).filter(|&f| spec.is_hidden(f) == spec.is_hidden(factor)).count()
}

fn mean_rows(g: &mut Graph, x: Var) -> Var {
    g.mean(x)
}

fn sum_or_zero(g: &mut Graph, xs: &[Var]) -> Result<Var, NumError> {
    let mut acc = match xs.first() {
        Some(&v) => v,
        None => return g.constant(Tensor::scalar(0.0)),
    };
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Row-wise leave-one-out masks for target `j`: one index out of the
/// `d_S + 1` inputs per row, drawn from the `(seed, step, j)` stream.
pub fn sample_leave_one_out(n_factors: usize, rows: usize, seed: u64, step: u64, j: usize) -> Vec<bool> {
    let mut r = rng::stream(seed, &[MASK_STREAM, step, j as u64]);
    let k = n_factors + 1;
    let mut mask = vec![true; rows * k];
    for row in 0..rows {
        mask[row * k + r.gen_range(0..k)] = false;
    }
    mask
}

/// The six VLB terms.
///
/// `enc` holds the live encoder's logits and samples; `target` the detached
/// encoder's logits under the same sample chain. `graph` is the current
/// binarized `(d_S + 1) × d_S` adjacency.
#[allow(clippy::too_many_arguments)]
pub fn vlb_losses(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    batch: &Batch,
    enc: &EncoderOutput,
    target: &EncoderOutput,
    graph: &[Vec<u8>],
    opts: &ObjectiveOptions,
    mask_seed: (u64, u64),
) -> Result<(VlbVars, Vec<FactorTerms>), ObjectiveError> {
    let n = spec.n_factors;
    if graph.len() != n + 1 || graph.iter().any(|r| r.len() != n) {
        return Err(ObjectiveError::Invalid(format!("graph must be {} x {n}", n + 1)));
    }
    let rows = batch.transition_rows();
    let inputs = transition_inputs(g, spec, batch, &enc.samples)?;
    let detached = if opts.masked_encoder_grad {
        None
    } else {
        let stopped: Vec<Vec<Var>> =
            enc.samples.iter().map(|ks| ks.iter().map(|&v| g.stop_gradient(v)).collect()).collect();
        Some(transition_inputs(g, spec, batch, &stopped)?)
    };
    let model = TransitionModel::new(spec, p);
    let mut terms: [Vec<Var>; 6] = Default::default();
    let mut per_factor = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    for j in 0..n {
        let parents: Vec<bool> = graph.iter().map(|row| row[j] != 0).collect();
        let (causal, fallback) = match InputMask::causal(&parents) {
            Ok(m) => (m, false),
            Err(_) => {
                debug!("graph column {j} has no parents; causal term uses the full mask");
                (InputMask::full(n), true)
            }
        };
        let masks = vec![
            InputMask::full(n).tile(rows),
            sample_leave_one_out(n, rows, mask_seed.0, mask_seed.1, j),
            causal.tile(rows),
        ];
        let feats = model.features(g, j, &inputs)?;
        let logits = match &detached {
            None => model.forward_multi(g, j, &feats, &masks)?,
            Some(d) => {
                let mut out = model.forward_multi(g, j, &feats, &masks[..1])?;
                let dfeats = model.features(g, j, d)?;
                out.extend(model.forward_multi(g, j, &dfeats, &masks[1..])?);
                out
            }
        };
        let hidden = spec.is_hidden(j);
        let k = role_index(spec, j);
        let mut vars = Vec::with_capacity(3);
        if hidden {
            let q = stack_time(g, &target.logits, k, 1, batch.horizon)?;
            let q = g.stop_gradient(q);
            for &lg in &logits {
                let kl = categorical_kl(g, q, lg)?;
                vars.push(mean_rows(g, kl));
            }
        } else {
            let labels = batch.stacked_obs(k, 1);
            for &lg in &logits {
                let ce = cross_entropy(g, lg, &labels)?;
                vars.push(mean_rows(g, ce));
            }
        }
        let base = if hidden { 3 } else { 0 };
        for (s, &v) in vars.iter().enumerate() {
            terms[base + s].push(v);
        }
        slots.push(vars);
        per_factor.push(FactorTerms {
            factor: j,
            hidden,
            causal_fallback: fallback,
            ..Default::default()
        });
    }
    for (ft, vars) in per_factor.iter_mut().zip(&slots) {
        ft.full = g.value(vars[0]).item();
        ft.masked = g.value(vars[1]).item();
        ft.causal = g.value(vars[2]).item();
    }
    let mut sums = [None; 6];
    for (s, t) in terms.iter().enumerate() {
        sums[s] = Some(sum_or_zero(g, t)?);
    }
    let [full_nll, masked_nll, causal_nll, full_kl, masked_kl, causal_kl] = sums.map(|v| v.expect("set"));
    Ok((
        VlbVars {
            full_nll,
            masked_nll,
            causal_nll,
            full_kl,
            masked_kl,
            causal_kl,
        },
        per_factor,
    ))
}

/// Mean reward cross-entropy over `t = 1 … T`, from the live encoder samples.
pub fn reward_loss(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    batch: &Batch,
    enc: &EncoderOutput,
) -> Result<Var, ObjectiveError> {
    let hidden = (0..spec.n_hidden())
        .map(|k| stack_time(g, &enc.samples, k, 1, batch.horizon))
        .collect::<Result<Vec<_>, _>>()?;
    let tau = g.constant(batch.stacked_tau(spec.n_categories))?;
    let logits = predict_reward(g, p, spec, &hidden, tau)?;
    let ce = cross_entropy(g, logits, &batch.stacked_rewards())?;
    Ok(g.mean(ce))
}

/// Builds the full training loss for one minibatch on `g`.
///
/// Live parameters are bound as gradient leaves; `φ̄` only appears as
/// constants, so a backward pass never produces gradients for it.
pub fn total_objective(
    g: &mut Graph,
    store: &ParameterStore,
    batch: &Batch,
    graph: &[Vec<u8>],
    opts: &ObjectiveOptions,
    seed: u64,
    step: u64,
) -> Result<Objective, ObjectiveError> {
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(ObjectiveError::Invalid(format!("lambda must be finite and >= 0, got {}", opts.lambda)));
    }
    let spec = &store.spec;
    let params = store.bind(g, EncoderSource::Live, true)?;
    let streams = GumbelStreams {
        seed,
        step,
        purpose: PURPOSE_TRAIN,
    };
    let enc = unroll_encoder(g, &params, spec, batch, PrevHidden::Recursive, Some(&streams))?;
    let target_params = store.bind_target_encoder(g)?;
    let target = unroll_encoder(g, &target_params, spec, batch, PrevHidden::Given(&enc.samples), None)?;
    let (v, per_factor) = vlb_losses(g, &params, spec, batch, &enc, &target, graph, opts, (seed, step))?;
    let reward = reward_loss(g, &params, spec, batch, &enc)?;
    let weighted = g.scale(reward, opts.lambda);
    let total = sum_or_zero(
        g,
        &[v.full_nll, v.masked_nll, v.causal_nll, v.full_kl, v.masked_kl, v.causal_kl, weighted],
    )?;
    let val = |x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        full_nll: val(v.full_nll),
        masked_nll: val(v.masked_nll),
        causal_nll: val(v.causal_nll),
        full_kl: val(v.full_kl),
        masked_kl: val(v.masked_kl),
        causal_kl: val(v.causal_kl),
        reward_ce: val(reward),
        total: val(total),
        per_factor,
    };
    if let Some((name, x)) = breakdown.components().into_iter().find(|(_, x)| !x.is_finite()) {
        return Err(ObjectiveError::NonFinite(format!("{name} = {x} ({breakdown:?})")));
    }
    Ok(Objective {
        total,
        breakdown,
        params,
    })
}

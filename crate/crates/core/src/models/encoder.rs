//! Hidden-state encoders `q(h_t | ·)` for the five conditioning windows.

use crate::numcore::{gumbel_softmax_with_noise, Graph, Tensor, Var};

use super::layers::{gru_cell, mlp, MLP_LAYERS};
use super::params::Bound;
use super::{Batch, EncoderVariant, GumbelStreams, ModelError, ModelSpec};

/// Source of `h_{t-1}` for the recursive encoders.
#[derive(Clone, Copy, Debug)]
pub enum PrevHidden<'a> {
    /// Feed back this unroll's own samples.
    Recursive,
    /// Use externally supplied one-hots, `given[t][k]` = factor `k` at time `t`.
    Given(&'a [Vec<Var>]),
}

/// Per-timestep, per-hidden-factor outputs, `t = 0 … T`.
#[derive(Clone, Debug, Default)]
pub struct EncoderOutput {
    /// `[m, l]` logits.
    pub logits: Vec<Vec<Var>>,
    /// Straight-through one-hot samples; empty when no noise source was given.
    pub samples: Vec<Vec<Var>>,
}

fn zero_future_action(spec: &ModelSpec, x: &Tensor) -> Tensor {
    let d_o = spec.observed_indices().len();
    let start = d_o * spec.n_categories;
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        row[start..start + spec.n_factors].iter_mut().for_each(|v| *v = 0.0);
        row[start + spec.n_factors + 1] = 0.0;
    }
    out
}

/// Encodes every timestep of `batch`.
///
/// `p` must bind the encoder under `phi/…` names (live or detached). With
/// `streams`, each timestep's logits are turned into straight-through
/// Gumbel-softmax samples; recursive variants under
/// [`PrevHidden::Recursive`] require `streams`.
pub fn unroll_encoder(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    batch: &Batch,
    prev: PrevHidden<'_>,
    streams: Option<&GumbelStreams>,
) -> Result<EncoderOutput, ModelError> {
    let (m, horizon, l) = (batch.m, batch.horizon, spec.n_categories);
    let d_h = spec.n_hidden();
    let variant = spec.encoder;
    if variant.is_recursive() && matches!(prev, PrevHidden::Recursive) && streams.is_none() {
        return Err(ModelError::Input("recursive unroll needs a Gumbel noise source".into()));
    }
    if let PrevHidden::Given(given) = prev {
        if given.len() < horizon {
            return Err(ModelError::Input(format!(
                "given hidden sequence has {} steps, need {horizon}",
                given.len()
            )));
        }
    }
    let xs: Vec<Var> = batch
        .step_inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<_, _>>()?;
    let future: Vec<Var> = if spec.future_action {
        xs.clone()
    } else {
        batch
            .step_inputs
            .iter()
            .map(|t| g.constant(zero_future_action(spec, t)))
            .collect::<Result<_, _>>()?
    };

    // Features that do not depend on the hidden chain, one per timestep.
    let width = spec.recurrent_dim;
    let context: Vec<Var> = match variant {
        EncoderVariant::History => {
            let mut h = g.constant(Tensor::zeros(&[m, width]))?;
            let mut out = Vec::with_capacity(horizon + 1);
            for x in xs.iter().take(horizon + 1) {
                h = gru_cell(g, p, "phi/fwd", *x, h, width)?;
                out.push(h);
            }
            out
        }
        EncoderVariant::CurrentFull | EncoderVariant::DvaeFull => {
            let mut h = g.constant(Tensor::zeros(&[m, width]))?;
            let mut out = vec![h; horizon + 1];
            for t in (0..=horizon).rev() {
                h = gru_cell(g, p, "phi/bwd", xs[t], h, width)?;
                out[t] = h;
            }
            out
        }
        EncoderVariant::Current1Step | EncoderVariant::Dvae1Step => {
            let mut out = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                let pair = g.concat(&[xs[t], future[t + 1]], 1)?;
                let f = mlp(g, p, "phi/now", MLP_LAYERS, pair)?;
                // Logits directly for current_1step, a feature for dvae_1step.
                out.push(if variant == EncoderVariant::Dvae1Step { g.tanh(f) } else { f });
            }
            out
        }
    };

    let mut output = EncoderOutput::default();
    let ctx = if variant.is_recursive() {
        let zeros = g.constant(Tensor::zeros(&[m, spec.mlp_width]))?;
        Some(g.add_row(zeros, p.get("phi/ctx")?)?)
    } else {
        None
    };
    for t in 0..=horizon {
        let logits = match variant {
            EncoderVariant::History | EncoderVariant::CurrentFull => mlp(g, p, "phi/head", MLP_LAYERS, context[t])?,
            EncoderVariant::Current1Step => context[t],
            EncoderVariant::Dvae1Step | EncoderVariant::DvaeFull => {
                let past = if t == 0 {
                    ctx.expect("recursive context")
                } else {
                    let prev_h: &[Var] = match prev {
                        PrevHidden::Recursive => &output.samples[t - 1],
                        PrevHidden::Given(given) => &given[t - 1],
                    };
                    let mut parts = prev_h.to_vec();
                    parts.push(xs[t - 1]);
                    let inp = g.concat(&parts, 1)?;
                    let e = mlp(g, p, "phi/past", MLP_LAYERS, inp)?;
                    g.tanh(e)
                };
                let both = g.concat(&[past, context[t]], 1)?;
                mlp(g, p, "phi/comb", MLP_LAYERS, both)?
            }
        };
        let per_factor: Vec<Var> = if d_h == 1 {
            vec![logits]
        } else {
            (0..d_h).map(|k| g.slice(logits, 1, k * l, l)).collect::<Result<_, _>>()?
        };
        if let Some(s) = streams {
            let samples = per_factor
                .iter()
                .enumerate()
                .map(|(k, &lg)| {
                    let noise = s.noise(batch, t, spec.hidden_indices[k], l);
                    gumbel_softmax_with_noise(g, lg, noise, spec.temperature, true)
                })
                .collect::<Result<Vec<_>, _>>()?;
            output.samples.push(samples);
        }
        output.logits.push(per_factor);
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, NoiseTarget, Trajectory};
    use crate::models::{EncoderSource, ParameterStore};

    fn trajectory(seed: usize) -> Trajectory {
        Trajectory {
            observations: (0..6).map(|t| vec![(t + seed) % 4, (2 * t + seed) % 4]).collect(),
            actions: (0..5).map(|t| vec![u8::from(t % 3 == 0), 0, u8::from(t % 3 == 1)]).collect(),
            tau: seed % 4,
            rewards: vec![0, 1, 0, 0, 1],
        }
    }

    fn run(store: &ParameterStore, tr: &Trajectory, given: Option<&[Vec<usize>]>) -> Vec<Vec<f64>> {
        let spec = &store.spec;
        let batch = Batch::new(spec, &[tr], &[0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, EncoderSource::Live, false).unwrap();
        let given_vars: Vec<Vec<Var>>;
        let prev = match given {
            Some(h) => {
                given_vars = h
                    .iter()
                    .map(|row| vec![g.constant(Tensor::one_hot(&[row[0]], 4).unwrap()).unwrap()])
                    .collect();
                PrevHidden::Given(&given_vars)
            }
            None => PrevHidden::Recursive,
        };
        let streams = GumbelStreams { seed: 1, step: 0, purpose: 0 };
        let out = unroll_encoder(&mut g, &p, spec, &batch, prev, Some(&streams)).unwrap();
        out.logits.iter().map(|f| g.value(f[0]).data().to_vec()).collect()
    }

    fn store(v: EncoderVariant) -> ParameterStore {
        ParameterStore::new(ModelSpec::new(&EnvConfig::chain3(NoiseTarget::Hidden), v), 5)
    }

    #[test]
    fn emits_one_output_per_timestep() {
        for v in EncoderVariant::ALL {
            let out = run(&store(v), &trajectory(1), None);
            assert_eq!(out.len(), 6, "{v}");
            assert!(out.iter().all(|r| r.len() == 4 && r.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn history_ignores_the_future() {
        let s = store(EncoderVariant::History);
        let base = trajectory(2);
        let a = run(&s, &base, None);
        for t in 0..5 {
            let mut pert = base.clone();
            for o in pert.observations.iter_mut().skip(t + 1) {
                o[1] = (o[1] + 1) % 4;
            }
            let b = run(&s, &pert, None);
            assert_eq!(a[..=t], b[..=t], "t = {t}");
        }
    }

    #[test]
    fn current_1step_window() {
        let s = store(EncoderVariant::Current1Step);
        let base = trajectory(3);
        let a = run(&s, &base, None);
        let t = 2;
        let mut pert = base.clone();
        pert.observations[t - 1][0] = (pert.observations[t - 1][0] + 1) % 4;
        pert.observations[t + 2][1] = (pert.observations[t + 2][1] + 1) % 4;
        assert_eq!(a[t], run(&s, &pert, None)[t]);
        let mut inside = base.clone();
        inside.observations[t + 1][1] = (inside.observations[t + 1][1] + 1) % 4;
        assert_ne!(a[t], run(&s, &inside, None)[t]);
    }

    #[test]
    fn dvae_1step_window_given_previous_hidden() {
        let s = store(EncoderVariant::Dvae1Step);
        let base = trajectory(0);
        let hid: Vec<Vec<usize>> = (0..6).map(|t| vec![t % 4]).collect();
        let a = run(&s, &base, Some(&hid));
        let t = 3;
        let mut pert = base.clone();
        pert.observations[t - 2][0] = (pert.observations[t - 2][0] + 1) % 4;
        pert.observations[t + 2][0] = (pert.observations[t + 2][0] + 1) % 4;
        pert.actions[t - 2] = vec![0, 0, 0];
        assert_eq!(a[t], run(&s, &pert, Some(&hid))[t]);
    }

    #[test]
    fn dvae_full_sees_everything_after_previous_step() {
        let s = store(EncoderVariant::DvaeFull);
        let base = trajectory(1);
        let hid: Vec<Vec<usize>> = (0..6).map(|t| vec![(t + 1) % 4]).collect();
        let a = run(&s, &base, Some(&hid));
        let t = 1;
        let mut far = base.clone();
        far.observations[5][1] = (far.observations[5][1] + 1) % 4;
        assert_ne!(a[t], run(&s, &far, Some(&hid))[t]);
        let mut prev = base.clone();
        prev.observations[0][0] = (prev.observations[0][0] + 1) % 4;
        assert_ne!(a[t], run(&s, &prev, Some(&hid))[t]);
        let mut older = base.clone();
        older.observations[0][0] = (older.observations[0][0] + 1) % 4;
        // o_0 is outside the window of step 2 once h_1 is given.
        assert_eq!(a[2], run(&s, &older, Some(&hid))[2]);
    }
}

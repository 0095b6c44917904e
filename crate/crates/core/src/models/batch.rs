use crate::env::Trajectory;
use crate::numcore::{gumbel_noise, rng, Tensor};

use super::{ModelError, ModelSpec};

/// A minibatch of trajectories laid out as per-timestep tensors.
///
/// Transition rows are stacked time-major: row `t * m + e` is episode `e`
/// at transition `t`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub m: usize,
    pub horizon: usize,
    pub episode_ids: Vec<u64>,
    /// Encoder inputs for `t = 0 … T + 1`; index `T + 1` is all-zero padding.
    pub step_inputs: Vec<Tensor>,
    /// `obs[t][k][e]`: value of the `k`-th observed factor.
    pub obs: Vec<Vec<Vec<usize>>>,
    /// `actions[t]`: `[m, d_S]` for `t < T`.
    pub actions: Vec<Tensor>,
    pub tau: Vec<usize>,
    /// `rewards[t - 1][e]` for `t = 1 … T`.
    pub rewards: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(spec: &ModelSpec, trajectories: &[&Trajectory], episode_ids: &[u64]) -> Result<Self, ModelError> {
        let m = trajectories.len();
        if m == 0 || episode_ids.len() != m {
            return Err(ModelError::Input("batch needs one id per trajectory and at least one trajectory".into()));
        }
        let horizon = trajectories[0].horizon();
        let (l, n) = (spec.n_categories, spec.n_factors);
        let d_o = spec.observed_indices().len();
        for tr in trajectories {
            let ok = tr.horizon() == horizon
                && tr.observations.len() == horizon + 1
                && tr.observations.iter().all(|o| o.len() == d_o && o.iter().all(|&v| v < l))
                && tr.actions.iter().all(|a| a.len() == n)
                && tr.tau < l
                && tr.rewards.len() == horizon;
            if !ok {
                return Err(ModelError::Input("trajectory does not match the model spec".into()));
            }
        }
        let x = spec.step_input_dim();
        let mut step_inputs = Vec::with_capacity(horizon + 2);
        for t in 0..=horizon + 1 {
            let mut data = vec![0.0; m * x];
            if t <= horizon {
                for (e, tr) in trajectories.iter().enumerate() {
                    let row = &mut data[e * x..(e + 1) * x];
                    for (k, &v) in tr.observations[t].iter().enumerate() {
                        row[k * l + v] = 1.0;
                    }
                    row[d_o * l + n] = 1.0;
                    if t < horizon {
                        for (i, &a) in tr.actions[t].iter().enumerate() {
                            row[d_o * l + i] = a as f64;
                        }
                        row[d_o * l + n + 1] = 1.0;
                    }
                }
            }
            step_inputs.push(Tensor::matrix(m, x, data)?);
        }
        let obs = (0..=horizon)
            .map(|t| (0..d_o).map(|k| trajectories.iter().map(|tr| tr.observations[t][k]).collect()).collect())
            .collect();
        let actions = (0..horizon)
            .map(|t| {
                let data = trajectories
                    .iter()
                    .flat_map(|tr| tr.actions[t].iter().map(|&a| a as f64))
                    .collect();
                Tensor::matrix(m, n, data)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            m,
            horizon,
            episode_ids: episode_ids.to_vec(),
            step_inputs,
            obs,
            actions,
            tau: trajectories.iter().map(|tr| tr.tau).collect(),
            rewards: (0..horizon)
                .map(|t| trajectories.iter().map(|tr| tr.rewards[t] as usize).collect())
                .collect(),
        })
    }

    /// Rows of transitions `t = 0 … T-1`.
    pub fn transition_rows(&self) -> usize {
        self.m * self.horizon
    }

    /// Observed factor `k` at times `t0 … t0 + T - 1`, stacked time-major.
    pub fn stacked_obs(&self, k: usize, t0: usize) -> Vec<usize> {
        (t0..t0 + self.horizon).flat_map(|t| self.obs[t][k].iter().copied()).collect()
    }

    /// Actions `a_0 … a_{T-1}` stacked time-major, `[m T, d_S]`.
    pub fn stacked_actions(&self) -> Tensor {
        let n = self.actions[0].cols();
        let data = self.actions.iter().flat_map(|a| a.data().iter().copied()).collect();
        Tensor::matrix(self.transition_rows(), n, data).expect("stacked actions")
    }

    /// Rewards `r_1 … r_T` stacked time-major.
    pub fn stacked_rewards(&self) -> Vec<usize> {
        self.rewards.iter().flatten().copied().collect()
    }

    /// `τ` one-hot repeated for each of the `T` reward rows.
    pub fn stacked_tau(&self, l: usize) -> Tensor {
        let ids: Vec<usize> = (0..self.horizon).flat_map(|_| self.tau.iter().copied()).collect();
        Tensor::one_hot(&ids, l).expect("tau in range")
    }
}

/// Counter-addressed Gumbel noise: one stream per
/// `(purpose, step, row, episode, timestep, factor)`.
#[derive(Clone, Copy, Debug)]
pub struct GumbelStreams {
    pub seed: u64,
    pub step: u64,
    pub purpose: u64,
}

impl GumbelStreams {
    pub fn noise(&self, batch: &Batch, t: usize, factor: usize, categories: usize) -> Tensor {
        let mut data = Vec::with_capacity(batch.m * categories);
        for (row, &ep) in batch.episode_ids.iter().enumerate() {
            let mut r = rng::stream(
                self.seed,
                &[self.purpose, self.step, row as u64, ep, t as u64, factor as u64],
            );
            data.extend(gumbel_noise(&mut r, categories));
        }
        Tensor::matrix(batch.m, categories, data).expect("noise shape")
    }
}

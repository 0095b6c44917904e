//! Exact references for the CMI estimator.
//!
//! [`TabularTransition`] is the true environment dynamics written as a
//! conditional table; masking input `i` marginalizes it under the data
//! distribution's independence structure (uniform state factors, actions from
//! the random intervention policy). [`enumeration_cmi`] computes the same
//! information quantities by brute force over every state and action.

use super::{GraphError, TransitionDistribution, TransitionSample};
use crate::env::{EnvConfig, Episode};

/// The environment's own `p(s^j_{t+1} | s_t, a_t)`.
#[derive(Clone, Debug)]
pub struct TabularTransition {
    cfg: EnvConfig,
    adjacency: Vec<Vec<u8>>,
    noisy: Vec<bool>,
    /// Equally likely policy actions.
    actions: Vec<Vec<u8>>,
}

impl TabularTransition {
    pub fn new(cfg: &EnvConfig) -> Result<Self, GraphError> {
        cfg.validate().map_err(|e| GraphError::Invalid(e.to_string()))?;
        let adjacency = cfg.adjacency_matrix().map_err(|e| GraphError::Invalid(e.to_string()))?;
        let n = cfg.n_factors;
        let mut actions = vec![vec![0u8; n]];
        for i in cfg.observed_indices() {
            let mut a = vec![0u8; n];
            a[i] = 1;
            actions.push(a);
        }
        Ok(Self {
            cfg: cfg.clone(),
            adjacency,
            noisy: cfg.noisy_mask(),
            actions,
        })
    }

    /// Probabilities of next factor `j` given a full input.
    pub fn probs(&self, j: usize, s: &[usize], a: &[u8]) -> Vec<f64> {
        let l = self.cfg.n_categories;
        let drive: usize = (0..self.cfg.n_factors).map(|i| self.adjacency[j][i] as usize * s[i]).sum();
        let base = (drive + a[j] as usize) % l;
        let mut p = vec![0.0; l];
        if self.noisy[j] {
            let [pm, p0, pp] = self.cfg.noise_probs;
            p[(base + l - 1) % l] += pm;
            p[base] += p0;
            p[(base + 1) % l] += pp;
        } else {
            p[base] = 1.0;
        }
        p
    }

    /// Probabilities of next factor `j` with input `i` marginalized out.
    pub fn masked_probs(&self, j: usize, s: &[usize], a: &[u8], i: usize) -> Vec<f64> {
        let (n, l) = (self.cfg.n_factors, self.cfg.n_categories);
        let mut out = vec![0.0; l];
        if i == n {
            let w = 1.0 / self.actions.len() as f64;
            for alt in &self.actions {
                add_scaled(&mut out, &self.probs(j, s, alt), w);
            }
        } else {
            let mut alt = s.to_vec();
            for v in 0..l {
                alt[i] = v;
                add_scaled(&mut out, &self.probs(j, &alt, a), 1.0 / l as f64);
            }
        }
        out
    }

    /// Transitions of recorded episodes with their true hidden values.
    pub fn sample_from_episodes(&self, episodes: &[Episode]) -> TransitionSample {
        let cfg = &self.cfg;
        let state = |ep: &Episode, t: usize| -> Vec<usize> {
            let (mut ko, mut kh) = (0, 0);
            (0..cfg.n_factors)
                .map(|f| {
                    if cfg.is_hidden(f) {
                        kh += 1;
                        ep.ground_truth().hiddens[t][kh - 1]
                    } else {
                        ko += 1;
                        ep.trajectory.observations[t][ko - 1]
                    }
                })
                .collect()
        };
        let mut out = TransitionSample::default();
        for ep in episodes {
            for t in 0..ep.trajectory.horizon() {
                out.states.push(state(ep, t));
                out.next.push(state(ep, t + 1));
                out.actions.push(ep.trajectory.actions[t].clone());
            }
        }
        out
    }
}

fn add_scaled(acc: &mut [f64], p: &[f64], w: f64) {
    acc.iter_mut().zip(p).for_each(|(a, &x)| *a += w * x);
}

fn ln_all(p: Vec<f64>) -> Vec<f64> {
    p.into_iter().map(f64::ln).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

impl TransitionDistribution for TabularTransition {
    fn n_factors(&self) -> usize {
        self.cfg.n_factors
    }

    fn is_hidden(&self, j: usize) -> bool {
        self.cfg.is_hidden(j)
    }

    fn log_probs(&self, j: usize, sample: &TransitionSample) -> Result<Vec<Vec<Vec<f64>>>, GraphError> {
        let n = self.cfg.n_factors;
        let l = self.cfg.n_categories;
        if sample.states.iter().chain(&sample.next).any(|s| s.len() != n || s.iter().any(|&v| v >= l))
            || sample.actions.iter().any(|a| a.len() != n)
        {
            return Err(GraphError::Shape("transition sample does not match the environment".into()));
        }
        let mut out = Vec::with_capacity(n + 2);
        out.push(
            sample
                .states
                .iter()
                .zip(&sample.actions)
                .map(|(s, a)| ln_all(self.probs(j, s, a)))
                .collect(),
        );
        for i in 0..=n {
            out.push(
                sample
                    .states
                    .iter()
                    .zip(&sample.actions)
                    .map(|(s, a)| ln_all(self.masked_probs(j, s, a, i)))
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Exact `I(s^j_{t+1} ; x_i | inputs \ x_i)` for every `(i, j)`, with state
/// factors uniform and independent and actions from the random intervention
/// policy, computed as `E[H(s^j_{t+1} | inputs \ x_i)] − E[H(s^j_{t+1} | inputs)]`.
pub fn enumeration_cmi(cfg: &EnvConfig) -> Result<Vec<Vec<f64>>, GraphError> {
    let table = TabularTransition::new(cfg)?;
    let (n, l) = (cfg.n_factors, cfg.n_categories);
    let states = l.checked_pow(n as u32).filter(|&s| s <= 1 << 20).ok_or_else(|| {
        GraphError::Invalid(format!("{l}^{n} states is too many to enumerate"))
    })?;
    let weight = 1.0 / (states * table.actions.len()) as f64;
    let mut out = vec![vec![0.0; n]; n + 1];
    let mut s = vec![0usize; n];
    for code in 0..states {
        let mut c = code;
        for v in s.iter_mut() {
            *v = c % l;
            c /= l;
        }
        for a in &table.actions {
            for j in 0..n {
                let h_full = entropy(&table.probs(j, &s, a));
                for (i, row) in out.iter_mut().enumerate() {
                    row[j] += weight * (entropy(&table.masked_probs(j, &s, a, i)) - h_full);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GraphKind, ModuloEnv, NoiseTarget, RandomInterventionPolicy};
    use crate::graph::cmi_matrix;

    const NOISE_ENTROPY: f64 = 0.394_398_4;

    fn h_eps() -> f64 {
        -(0.9f64 * 0.9f64.ln() + 0.1 * 0.05f64.ln())
    }

    #[test]
    fn noise_entropy_constant() {
        assert!((h_eps() - NOISE_ENTROPY).abs() < 1e-6);
    }

    #[test]
    fn chain_oracle_values() {
        let ln4 = 4f64.ln();
        let obs = enumeration_cmi(&EnvConfig::chain3(NoiseTarget::Observation)).unwrap();
        assert!((obs[1][2] - (ln4 - h_eps())).abs() < 1e-9, "h1 -> o2 = {}", obs[1][2]);
        assert!(obs[0][2].abs() < 1e-12);
        let hid = enumeration_cmi(&EnvConfig::chain3(NoiseTarget::Hidden)).unwrap();
        assert!((hid[0][1] - (ln4 - h_eps())).abs() < 1e-9, "o1 -> h1 = {}", hid[0][1]);
        assert!((hid[1][2] - ln4).abs() < 1e-9);
        assert!(hid[3][1].abs() < 1e-12, "action -> h1");
    }

    #[test]
    fn oracle_separates_parents_from_non_parents() {
        for cfg in [
            EnvConfig::chain3(NoiseTarget::Hidden),
            EnvConfig::chain3(NoiseTarget::Observation),
            EnvConfig::five(GraphKind::Chain, NoiseTarget::Observation),
            EnvConfig::five(GraphKind::Full, NoiseTarget::Observation),
        ] {
            let gt = ModuloEnv::new(cfg.clone()).unwrap().ground_truth_graph();
            let cmi = enumeration_cmi(&cfg).unwrap();
            for (i, row) in cmi.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if gt.edge(i, j) {
                        assert!(v > 0.3, "parent ({i},{j}) = {v}");
                    } else {
                        assert!(v < 0.01, "non-parent ({i},{j}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn tabular_estimate_matches_oracle_on_data() {
        for target in [NoiseTarget::Hidden, NoiseTarget::Observation] {
            let cfg = EnvConfig::chain3(target);
            let env = ModuloEnv::new(cfg.clone()).unwrap();
            let eps: Vec<Episode> = (0..2000)
                .map(|i| env.rollout_indexed(&RandomInterventionPolicy, 5, i).unwrap())
                .collect();
            let table = TabularTransition::new(&cfg).unwrap();
            let est = cmi_matrix(&table, &table.sample_from_episodes(&eps)).unwrap();
            let oracle = enumeration_cmi(&cfg).unwrap();
            for (a, b) in est.iter().flatten().zip(oracle.iter().flatten()) {
                assert!((a - b).abs() < 0.05, "{target:?}: estimate {a} vs oracle {b}");
            }
        }
    }

    #[test]
    fn masked_nll_exceeds_full_nll_for_parents() {
        let cfg = EnvConfig::chain3(NoiseTarget::Observation);
        let table = TabularTransition::new(&cfg).unwrap();
        let env = ModuloEnv::new(cfg).unwrap();
        let eps: Vec<Episode> = (0..500)
            .map(|i| env.rollout_indexed(&RandomInterventionPolicy, 8, i).unwrap())
            .collect();
        let sample = table.sample_from_episodes(&eps);
        let lp = table.log_probs(2, &sample).unwrap();
        let nll = |m: usize| -> f64 {
            -lp[m].iter().zip(&sample.next).map(|(r, nx)| r[nx[2]]).sum::<f64>() / sample.len() as f64
        };
        // Inputs 1 (h1), 2 (o2) and the action (3) are parents of o2.
        for i in [1, 2, 3] {
            assert!(nll(1 + i) > nll(0) + 0.1, "i = {i}");
        }
        assert!((nll(1) - nll(0)).abs() < 1e-12);
    }
}

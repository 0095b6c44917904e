//! The modulo factored-POMDP.
//!
//! State factors take values in `{0, …, l-1}` and evolve as
//! `s' = (A s + a + ε) mod l`, where `A` is the parent adjacency, `a` a binary
//! intervention vector restricted to observed factors, and `ε ∈ {-1, 0, 1}`
//! per-factor exogenous noise.

mod config;
mod dataset;
mod properties;

pub use config::{EnvConfig, GraphKind, NoiseTarget};
pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader};
pub use properties::{verify_properties, PropertyReport};

use rand::Rng;
use thiserror::Error;

use crate::numcore::rng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("corrupt state: factor {factor} has value {value}, expected < {categories}")]
    CorruptState {
        factor: usize,
        value: usize,
        categories: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("property {property} violated: {detail}")]
    PropertyViolation { property: &'static str, detail: String },
}

/// Full state vector `s = (o, h)` in factor order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FactoredState(pub Vec<usize>);

impl FactoredState {
    pub fn observed(&self, cfg: &EnvConfig) -> Vec<usize> {
        cfg.observed_indices().iter().map(|&i| self.0[i]).collect()
    }

    pub fn hidden(&self, cfg: &EnvConfig) -> Vec<usize> {
        cfg.hidden_indices.iter().map(|&i| self.0[i]).collect()
    }
}

/// Per-factor binary interventions; hidden entries are always 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionVector(pub Vec<u8>);

impl ActionVector {
    pub fn none(n_factors: usize) -> Self {
        Self(vec![0; n_factors])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseVector(pub Vec<i8>);

impl NoiseVector {
    pub fn zero(n_factors: usize) -> Self {
        Self(vec![0; n_factors])
    }
}

/// What the learner may see of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    /// `T + 1` rows of observed factor values.
    pub observations: Vec<Vec<usize>>,
    /// `T` per-factor action vectors.
    pub actions: Vec<Vec<u8>>,
    /// Episodic reward target.
    pub tau: usize,
    /// Rewards `r_1 … r_T`.
    pub rewards: Vec<u8>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Evaluation-only record of the latent process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    /// `T + 1` rows of hidden factor values.
    pub hiddens: Vec<Vec<usize>>,
    /// `T` rows of per-factor noise.
    pub noise: Vec<Vec<i8>>,
}

/// One offline episode. Learning code only ever receives `trajectory`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub trajectory: Trajectory,
    ground_truth: GroundTruth,
}

impl Episode {
    pub fn new(trajectory: Trajectory, ground_truth: GroundTruth) -> Self {
        Self {
            trajectory,
            ground_truth,
        }
    }

    /// Latent values for scoring. Not for use in training code.
    pub fn ground_truth(&self) -> &GroundTruth {
        &self.ground_truth
    }
}

/// `(d_S + 1) × d_S` ground-truth graph; row `d_S` is the action node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionGraphGT(pub Vec<Vec<u8>>);

impl TransitionGraphGT {
    pub fn edge(&self, parent: usize, child: usize) -> bool {
        self.0[parent][child] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.0.iter().flatten().filter(|&&v| v == 1).count()
    }
}

/// A validated environment.
#[derive(Clone, Debug)]
pub struct ModuloEnv {
    cfg: EnvConfig,
    adjacency: Vec<Vec<u8>>,
    noisy: Vec<bool>,
    observed: Vec<usize>,
}

impl ModuloEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let adjacency = cfg.adjacency_matrix()?;
        let noisy = cfg.noisy_mask();
        let observed = cfg.observed_indices();
        Ok(Self {
            cfg,
            adjacency,
            noisy,
            observed,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    /// `s' = (A s + a + ε) mod l`.
    pub fn step(&self, s: &FactoredState, a: &ActionVector, eps: &NoiseVector) -> Result<FactoredState, EnvError> {
        let (n, l) = (self.cfg.n_factors, self.cfg.n_categories);
        if s.0.len() != n || a.0.len() != n || eps.0.len() != n {
            return Err(EnvError::Shape(format!(
                "state/action/noise lengths {}/{}/{} for {n} factors",
                s.0.len(),
                a.0.len(),
                eps.0.len()
            )));
        }
        if let Some((factor, &value)) = s.0.iter().enumerate().find(|(_, &v)| v >= l) {
            return Err(EnvError::CorruptState {
                factor,
                value,
                categories: l,
            });
        }
        let next = (0..n)
            .map(|j| {
                let drive: i64 = (0..n).map(|i| self.adjacency[j][i] as i64 * s.0[i] as i64).sum();
                (drive + a.0[j] as i64 + eps.0[j] as i64).rem_euclid(l as i64) as usize
            })
            .collect();
        Ok(FactoredState(next))
    }

    /// Independent per-factor noise; zero on factors outside the noise target.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseVector {
        let [pm, p0, _] = self.cfg.noise_probs;
        NoiseVector(
            self.noisy
                .iter()
                .map(|&noisy| {
                    if !noisy {
                        return 0;
                    }
                    let u: f64 = rng.gen();
                    if u < pm {
                        -1
                    } else if u < pm + p0 {
                        0
                    } else {
                        1
                    }
                })
                .collect(),
        )
    }

    pub fn ground_truth_graph(&self) -> TransitionGraphGT {
        let n = self.cfg.n_factors;
        let mut g = vec![vec![0u8; n]; n + 1];
        for (j, row) in self.adjacency.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                g[i][j] = v;
            }
        }
        for &j in &self.observed {
            g[n][j] = 1;
        }
        TransitionGraphGT(g)
    }

    /// Samples one episode of `horizon` transitions.
    pub fn rollout<P: Policy + ?Sized, R: Rng>(&self, policy: &P, rng: &mut R) -> Result<Episode, EnvError> {
        let cfg = &self.cfg;
        let (n, l) = (cfg.n_factors, cfg.n_categories);
        let mut s = FactoredState(
            (0..n)
                .map(|i| if cfg.is_hidden(i) { cfg.initial_hidden } else { rng.gen_range(0..l) })
                .collect(),
        );
        let tau = rng.gen_range(0..l);
        let mut observations = vec![s.observed(cfg)];
        let mut hiddens = vec![s.hidden(cfg)];
        let (mut actions, mut rewards, mut noise) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.horizon {
            let a = policy.act(self, &s, rng);
            let eps = self.sample_noise(rng);
            s = self.step(&s, &a, &eps)?;
            let h = s.hidden(cfg);
            rewards.push(reward(&h, tau));
            observations.push(s.observed(cfg));
            hiddens.push(h);
            actions.push(a.0);
            noise.push(eps.0);
        }
        Ok(Episode::new(
            Trajectory {
                observations,
                actions,
                tau,
                rewards,
            },
            GroundTruth { hiddens, noise },
        ))
    }

    /// Episode `index` drawn from its own stream of `seed`.
    pub fn rollout_indexed<P: Policy + ?Sized>(&self, policy: &P, seed: u64, index: u64) -> Result<Episode, EnvError> {
        let mut r = rng::stream(seed, &[0xD47A, index]);
        self.rollout(policy, &mut r)
    }
}

/// `1` iff the first hidden factor equals the episode target.
pub fn reward(hidden: &[usize], tau: usize) -> u8 {
    u8::from(hidden.first() == Some(&tau))
}

/// Data-collection policy.
pub trait Policy: Sync {
    fn act(&self, env: &ModuloEnv, s: &FactoredState, rng: &mut dyn rand::RngCore) -> ActionVector;
}

/// Intervenes on one uniformly chosen observed factor, or on none; each
/// option is equally likely.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomInterventionPolicy;

impl Policy for RandomInterventionPolicy {
    fn act(&self, env: &ModuloEnv, _s: &FactoredState, rng: &mut dyn rand::RngCore) -> ActionVector {
        let observed = env.observed_indices();
        let pick = rng.gen_range(0..=observed.len());
        let mut a = ActionVector::none(env.config().n_factors);
        if pick < observed.len() {
            a.0[observed[pick]] = 1;
        }
        a
    }
}

/// A fixed action sequence, for replay tests.
#[derive(Debug)]
pub struct ScriptedPolicy(pub std::sync::Mutex<std::collections::VecDeque<ActionVector>>);

impl Policy for ScriptedPolicy {
    fn act(&self, env: &ModuloEnv, _s: &FactoredState, _rng: &mut dyn rand::RngCore) -> ActionVector {
        self.0
            .lock()
            .expect("policy lock")
            .pop_front()
            .unwrap_or_else(|| ActionVector::none(env.config().n_factors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(target: NoiseTarget) -> ModuloEnv {
        ModuloEnv::new(EnvConfig::chain3(target)).unwrap()
    }

    #[test]
    fn chain_step_matches_hand_evaluation() {
        let env = chain(NoiseTarget::Hidden);
        let next = env
            .step(&FactoredState(vec![1, 2, 3]), &ActionVector(vec![1, 0, 0]), &NoiseVector::zero(3))
            .unwrap();
        assert_eq!(next.0, vec![2, 3, 1]);
    }

    #[test]
    fn zero_is_fixed_point() {
        let env = chain(NoiseTarget::Hidden);
        let next = env
            .step(&FactoredState(vec![0, 0, 0]), &ActionVector::none(3), &NoiseVector::zero(3))
            .unwrap();
        assert_eq!(next.0, vec![0, 0, 0]);
    }

    #[test]
    fn noise_on_one_factor_shifts_only_that_factor() {
        let env = chain(NoiseTarget::Hidden);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let s = FactoredState(vec![a, b, c]);
                    let act = ActionVector(vec![0, 0, 1]);
                    let base = env.step(&s, &act, &NoiseVector::zero(3)).unwrap();
                    let shifted = env.step(&s, &act, &NoiseVector(vec![0, 1, 0])).unwrap();
                    assert_eq!(shifted.0[0], base.0[0]);
                    assert_eq!(shifted.0[2], base.0[2]);
                    assert_eq!(shifted.0[1], (base.0[1] + 1) % 4);
                }
            }
        }
    }

    #[test]
    fn corrupt_state_rejected() {
        let env = chain(NoiseTarget::Hidden);
        let err = env
            .step(&FactoredState(vec![0, 4, 0]), &ActionVector::none(3), &NoiseVector::zero(3))
            .unwrap_err();
        assert!(matches!(err, EnvError::CorruptState { factor: 1, value: 4, .. }));
    }

    #[test]
    fn hidden_noise_never_touches_observed_factors() {
        let env = chain(NoiseTarget::Hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let e = env.sample_noise(&mut rng);
            assert_eq!((e.0[0], e.0[2]), (0, 0));
        }
    }

    #[test]
    fn noise_zero_frequency() {
        let env = chain(NoiseTarget::Hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let zeros = (0..n).filter(|_| env.sample_noise(&mut rng).0[1] == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "freq = {freq}");
    }

    #[test]
    fn degenerate_noise_is_zero() {
        let mut cfg = EnvConfig::chain3(NoiseTarget::Observation);
        cfg.noise_probs = [0.0, 1.0, 0.0];
        let env = ModuloEnv::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(env.sample_noise(&mut rng), NoiseVector::zero(3));
        }
    }

    #[test]
    fn reward_cases() {
        assert_eq!(reward(&[2], 2), 1);
        assert_eq!(reward(&[2], 3), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let hits: u32 = (0..n)
            .map(|_| reward(&[rng.gen_range(0..4)], rng.gen_range(0..4)) as u32)
            .sum();
        assert!((hits as f64 / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn rollout_lengths() {
        let env = chain(NoiseTarget::Hidden);
        let ep = env.rollout_indexed(&RandomInterventionPolicy, 0, 0).unwrap();
        let tr = &ep.trajectory;
        assert_eq!(tr.observations.len(), 6);
        assert_eq!(tr.actions.len(), 5);
        assert_eq!(tr.rewards.len(), 5);
        assert_eq!(ep.ground_truth().hiddens.len(), 6);
        assert_eq!(ep.ground_truth().noise.len(), 5);
        assert_eq!(ep.ground_truth().hiddens[0], vec![0]);
        for a in &tr.actions {
            assert_eq!(a[1], 0, "hidden factor must never be intervened");
            assert!(a.iter().map(|&v| v as u32).sum::<u32>() <= 1);
        }
    }

    #[test]
    fn same_seed_same_rollout() {
        let env = chain(NoiseTarget::Observation);
        let a = env.rollout_indexed(&RandomInterventionPolicy, 9, 17).unwrap();
        let b = env.rollout_indexed(&RandomInterventionPolicy, 9, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_rollout_replays_through_step() {
        let mut cfg = EnvConfig::chain3(NoiseTarget::Hidden);
        cfg.noise_probs = [0.0, 1.0, 0.0];
        let env = ModuloEnv::new(cfg.clone()).unwrap();
        let ep = env.rollout_indexed(&RandomInterventionPolicy, 5, 1).unwrap();
        let tr = &ep.trajectory;
        let mut s = FactoredState(vec![tr.observations[0][0], ep.ground_truth().hiddens[0][0], tr.observations[0][1]]);
        for t in 0..cfg.horizon {
            s = env.step(&s, &ActionVector(tr.actions[t].clone()), &NoiseVector::zero(3)).unwrap();
            assert_eq!(s.observed(&cfg), tr.observations[t + 1]);
            assert_eq!(s.hidden(&cfg), ep.ground_truth().hiddens[t + 1]);
        }
    }

    #[test]
    fn chain_ground_truth_edges() {
        let g = chain(NoiseTarget::Hidden).ground_truth_graph();
        let expected = vec![vec![1, 1, 0], vec![0, 1, 1], vec![0, 0, 1], vec![1, 0, 1]];
        assert_eq!(g.0, expected);
        assert_eq!(g.edge_count(), 7);
    }

    #[test]
    fn full_five_is_lower_triangular() {
        let env = ModuloEnv::new(EnvConfig::five(GraphKind::Full, NoiseTarget::Observation)).unwrap();
        let g = env.ground_truth_graph();
        for i in 0..5 {
            for j in 0..5 {
                // parent i feeds child j iff i <= j
                assert_eq!(g.edge(i, j), i <= j);
            }
        }
        assert_eq!(g.0[5], vec![1, 1, 0, 1, 1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EnvConfig::chain3(NoiseTarget::Hidden);
        cfg.noise_probs = [0.5, 0.6, 0.0];
        assert!(ModuloEnv::new(cfg).is_err());
        let mut cfg = EnvConfig::chain3(NoiseTarget::Hidden);
        cfg.hidden_indices = vec![0, 1, 2];
        assert!(ModuloEnv::new(cfg).is_err());
        let mut cfg = EnvConfig::chain3(NoiseTarget::Hidden);
        cfg.graph_kind = GraphKind::Explicit;
        assert!(ModuloEnv::new(cfg).is_err());
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    /// Each factor reads itself and its predecessor.
    Chain,
    /// Lower-triangular adjacency: each factor reads itself and every predecessor.
    Full,
    /// Adjacency taken from `EnvConfig::adjacency`.
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Hidden,
    Observation,
    /// Factors listed in `EnvConfig::noisy_factors`.
    Custom,
}

/// Full description of a modulo environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_factors: usize,
    pub n_categories: usize,
    pub graph_kind: GraphKind,
    /// Row `j` lists the parents of next-step factor `j`. Only read for `explicit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<u8>>>,
    pub hidden_indices: Vec<usize>,
    /// Probabilities of noise values `[-1, 0, +1]`.
    pub noise_probs: [f64; 3],
    pub noise_target: NoiseTarget,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noisy_factors: Vec<usize>,
    pub horizon: usize,
    pub initial_hidden: usize,
    pub seed: u64,
}

impl EnvConfig {
    /// Three-factor chain `o¹ → h¹ → o²` with four categories and horizon 5.
    pub fn chain3(noise_target: NoiseTarget) -> Self {
        Self {
            n_factors: 3,
            n_categories: 4,
            graph_kind: GraphKind::Chain,
            adjacency: None,
            hidden_indices: vec![1],
            noise_probs: [0.05, 0.9, 0.05],
            noise_target,
            noisy_factors: Vec::new(),
            horizon: 5,
            initial_hidden: 0,
            seed: 0,
        }
    }

    /// Five factors, one hidden factor in the middle (index 2).
    pub fn five(graph_kind: GraphKind, noise_target: NoiseTarget) -> Self {
        Self {
            n_factors: 5,
            graph_kind,
            hidden_indices: vec![2],
            ..Self::chain3(noise_target)
        }
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_indices.len()
    }

    pub fn n_observed(&self) -> usize {
        self.n_factors - self.hidden_indices.len()
    }

    pub fn is_hidden(&self, factor: usize) -> bool {
        self.hidden_indices.contains(&factor)
    }

    /// Factor indices not listed as hidden, ascending.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n_factors).filter(|&i| !self.is_hidden(i)).collect()
    }

    /// `A[j][i] = 1` iff factor `i` at `t` feeds factor `j` at `t + 1`.
    pub fn adjacency_matrix(&self) -> Result<Vec<Vec<u8>>, EnvError> {
        let n = self.n_factors;
        Ok(match self.graph_kind {
            GraphKind::Chain => (0..n)
                .map(|j| (0..n).map(|i| u8::from(i == j || i + 1 == j)).collect())
                .collect(),
            GraphKind::Full => (0..n).map(|j| (0..n).map(|i| u8::from(i <= j)).collect()).collect(),
            GraphKind::Explicit => {
                let a = self
                    .adjacency
                    .clone()
                    .ok_or_else(|| EnvError::InvalidConfig("graph_kind = explicit needs `adjacency`".into()))?;
                if a.len() != n || a.iter().any(|row| row.len() != n) {
                    return Err(EnvError::InvalidConfig(format!("adjacency must be {n}x{n}")));
                }
                if a.iter().flatten().any(|&v| v > 1) {
                    return Err(EnvError::InvalidConfig("adjacency entries must be 0 or 1".into()));
                }
                a
            }
        })
    }

    /// Per-factor flag: does this factor receive exogenous noise?
    pub fn noisy_mask(&self) -> Vec<bool> {
        (0..self.n_factors)
            .map(|i| match self.noise_target {
                NoiseTarget::Hidden => self.is_hidden(i),
                NoiseTarget::Observation => !self.is_hidden(i),
                NoiseTarget::Custom => self.noisy_factors.contains(&i),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.n_factors == 0 || self.n_categories < 2 {
            return bad("need at least one factor and two categories".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        let mut seen = vec![false; self.n_factors];
        for &h in &self.hidden_indices {
            if h >= self.n_factors || seen[h] {
                return bad(format!("hidden index {h} out of range or repeated"));
            }
            seen[h] = true;
        }
        if self.n_observed() == 0 {
            return bad("at least one factor must be observed".into());
        }
        if self.initial_hidden >= self.n_categories {
            return bad(format!("initial_hidden {} >= {} categories", self.initial_hidden, self.n_categories));
        }
        let total: f64 = self.noise_probs.iter().sum();
        if self.noise_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("noise_probs {:?} must be a distribution", self.noise_probs));
        }
        if self.noisy_factors.iter().any(|&i| i >= self.n_factors) {
            return bad("noisy factor out of range".into());
        }
        let a = self.adjacency_matrix()?;
        if self.graph_kind != GraphKind::Explicit && (0..self.n_factors).any(|j| a[j][j] != 1) {
            return bad("chain/full adjacency must carry the diagonal".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of everything except the sampling seed: two datasets with the same
    /// dynamics hash come from the same environment.
    pub fn dynamics_hash(&self) -> String {
        Self { seed: 0, ..self.clone() }.hash()
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::env::EnvConfig;
use crate::models::{EncoderVariant, ModelSpec};
use crate::objective::ObjectiveOptions;

/// Everything one training run needs besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderVariant,
    /// Optimizer steps `M`.
    pub steps: u64,
    /// Episodes per minibatch `m`.
    pub batch_size: usize,
    /// Initial learning rate `α`.
    pub lr: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_factor: f64,
    /// Reward-loss weight `λ`.
    pub lambda: f64,
    /// CMI threshold `δ`.
    pub threshold: f64,
    /// CMI evaluation period `N`.
    pub cmi_period: u64,
    pub ema_coeff: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Copy `φ` into `φ̄` after every step.
    pub sync_target: bool,
    /// Let masked/causal terms backpropagate into the encoder.
    pub masked_encoder_grad: bool,
    /// 1-step encoders see `a_{t+1}`.
    pub future_action: bool,
    pub feature_dim: usize,
    pub mlp_width: usize,
    pub recurrent_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderVariant::DvaeFull,
            steps: 10_000,
            batch_size: 32,
            lr: 1e-3,
            lr_milestones: vec![4_000, 8_000],
            lr_factor: 0.3,
            lambda: 1.0,
            threshold: 0.03,
            cmi_period: 100,
            ema_coeff: 0.9,
            temperature: 1.0,
            seed: 0,
            checkpoint_every: 0,
            sync_target: true,
            masked_encoder_grad: true,
            future_action: true,
            feature_dim: 64,
            mlp_width: 64,
            recurrent_dim: 64,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.cmi_period == 0 {
            return bad("steps, batch_size and cmi_period must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.threshold > 0.0) || !(self.temperature > 0.0) {
            return bad("lr, threshold and temperature must be positive".into());
        }
        if !(self.lr_factor > 0.0) || !(0.0..1.0).contains(&self.ema_coeff) || !(self.lambda >= 0.0) {
            return bad("need lr_factor > 0, 0 <= ema_coeff < 1 and lambda >= 0".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return bad("lr_milestones must be sorted ascending".into());
        }
        if self.feature_dim == 0 || self.mlp_width == 0 || self.recurrent_dim == 0 {
            return bad("network widths must be positive".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, env: &EnvConfig) -> ModelSpec {
        ModelSpec {
            feature_dim: self.feature_dim,
            mlp_width: self.mlp_width,
            recurrent_dim: self.recurrent_dim,
            temperature: self.temperature,
            future_action: self.future_action,
            ..ModelSpec::new(env, self.encoder)
        }
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            lambda: self.lambda,
            masked_encoder_grad: self.masked_encoder_grad,
        }
    }
}

/// Dataset sizes for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_episodes: 10_000,
            eval_episodes: 1_000,
        }
    }
}

/// The TOML experiment file: `[env]`, `[train]`, `[data]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.env.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// `α0 · factor^(number of milestones ≤ step)`.
pub fn lr_schedule(step: u64, lr0: f64, milestones: &[u64], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| step >= m).count();
    lr0 * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::NoiseTarget;

    #[test]
    fn schedule_examples() {
        let ms = [4000, 8000];
        assert_eq!(lr_schedule(0, 1e-3, &ms, 0.3), 1e-3);
        assert_eq!(lr_schedule(3999, 1e-3, &ms, 0.3), 1e-3);
        assert!((lr_schedule(9000, 1e-3, &ms, 0.3) - 9e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(9000, 1e-3, &ms, 1.0), 1e-3);
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig {
            env: EnvConfig::chain3(NoiseTarget::Hidden),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let minimal = format!("[env]\n{}", toml::to_string(&cfg.env).unwrap());
        assert_eq!(ExperimentConfig::from_toml(&minimal).unwrap().train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let env = toml::to_string(&EnvConfig::chain3(NoiseTarget::Hidden)).unwrap();
        assert!(ExperimentConfig::from_toml(&format!("[env]\n{env}\n[train]\nstepz = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("[env]\n{env}\n[train]\nlr = 0.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("[env]\n{env}\n[train]\nlr_milestones = [5, 2]\n")).is_err());
    }
}

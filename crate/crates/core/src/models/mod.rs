//! Learnable components: hidden-state encoders, the factor-wise masked
//! transition model, and the reward head.
//!
//! All parameters live in one [`ParameterStore`] under group prefixes:
//! `theta_o/` and `theta_h/` (transition model for observed and hidden
//! targets), `phi/` (encoder), `phi_bar/` (detached encoder copy) and `psi/`
//! (reward head). Network code always addresses the encoder as `phi/…`;
//! whether those names resolve to the live or the detached tensors is decided
//! when the store is bound to a [`Graph`](crate::numcore::Graph).

mod batch;
mod checkpoint;
mod encoder;
mod layers;
mod params;
mod reward;
mod transition;

pub use batch::{Batch, GumbelStreams};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use encoder::{unroll_encoder, EncoderOutput, PrevHidden};
pub use params::{Bound, EncoderSource, ParamDecl, ParameterStore};
pub use reward::predict_reward;
pub use transition::{InputMask, MaskKind, TransitionInputs, TransitionModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("checkpoint tensor `{name}`: {detail}")]
    Mismatch { name: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which past/future window the hidden encoder conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// `(o_{0:t}, a_{0:t})`, forward recurrence.
    History,
    /// `(o_{t:t+1}, a_{t:t+1})`, feed-forward.
    #[serde(rename = "current_1step")]
    Current1Step,
    /// `(o_{t:T}, a_{t:T})`, backward recurrence.
    CurrentFull,
    /// `(h_{t-1}, o_{t-1:t+1}, a_{t-1:t+1})`, recursive sample plus feed-forward.
    #[serde(rename = "dvae_1step")]
    Dvae1Step,
    /// `(h_{t-1}, o_{t-1:T}, a_{t-1:T})`, recursive sample plus backward recurrence.
    DvaeFull,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 5] = [
        EncoderVariant::History,
        EncoderVariant::Current1Step,
        EncoderVariant::CurrentFull,
        EncoderVariant::Dvae1Step,
        EncoderVariant::DvaeFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::History => "history",
            Self::Current1Step => "current_1step",
            Self::CurrentFull => "current_full",
            Self::Dvae1Step => "dvae_1step",
            Self::DvaeFull => "dvae_full",
        }
    }

    /// Conditions on the previous hidden sample.
    pub fn is_recursive(self) -> bool {
        matches!(self, Self::Dvae1Step | Self::DvaeFull)
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown encoder `{s}` (expected one of history, current_1step, current_full, dvae_1step, dvae_full)"))
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes and structure of every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_factors: usize,
    pub n_categories: usize,
    pub hidden_indices: Vec<usize>,
    pub encoder: EncoderVariant,
    /// Per-input feature width of the masked transition model.
    pub feature_dim: usize,
    pub mlp_width: usize,
    pub recurrent_dim: usize,
    pub temperature: f64,
    /// Whether the 1-step encoders see `a_{t+1}`.
    pub future_action: bool,
}

impl ModelSpec {
    pub fn new(env: &EnvConfig, encoder: EncoderVariant) -> Self {
        Self {
            n_factors: env.n_factors,
            n_categories: env.n_categories,
            hidden_indices: env.hidden_indices.clone(),
            encoder,
            feature_dim: 64,
            mlp_width: 64,
            recurrent_dim: 64,
            temperature: 1.0,
            future_action: true,
        }
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_indices.len()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n_factors).filter(|i| !self.hidden_indices.contains(i)).collect()
    }

    pub fn is_hidden(&self, factor: usize) -> bool {
        self.hidden_indices.contains(&factor)
    }

    /// Width of the per-timestep encoder input: observed one-hots, the
    /// action vector, and two flags (step present, action present).
    pub fn step_input_dim(&self) -> usize {
        self.observed_indices().len() * self.n_categories + self.n_factors + 2
    }
}

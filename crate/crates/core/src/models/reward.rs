use crate::numcore::{Graph, Var};

use super::layers::{mlp, MLP_LAYERS};
use super::params::{Bound, PSI};
use super::{ModelError, ModelSpec};

/// Reward logits over `{0, 1}` from the hidden sample(s) and the one-hot
/// target `τ`. Observed factors are not inputs.
pub fn predict_reward(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    hidden: &[Var],
    tau_onehot: Var,
) -> Result<Var, ModelError> {
    if hidden.len() != spec.n_hidden() {
        return Err(ModelError::Input(format!(
            "reward head expects {} hidden factors, got {}",
            spec.n_hidden(),
            hidden.len()
        )));
    }
    let mut parts = hidden.to_vec();
    parts.push(tau_onehot);
    let x = g.concat(&parts, 1)?;
    Ok(mlp(g, p, &format!("{PSI}head"), MLP_LAYERS, x)?)
}

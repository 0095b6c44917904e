use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
///
/// All gradients are validated before anything is written, so a rejected
/// step leaves both `params` and `state` untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumError> {
    if !(lr > 0.0) {
        return Err(NumError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| NumError::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NumError::NonFiniteGradient(name.clone()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            first: vec![0.0; g.len()],
            second: vec![0.0; g.len()],
        });
        for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let m = b1 * mom.first[i] + (1.0 - b1) * gv;
            let v = b2 * mom.second[i] + (1.0 - b2) * gv * gv;
            mom.first[i] = m;
            mom.second[i] = v;
            *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

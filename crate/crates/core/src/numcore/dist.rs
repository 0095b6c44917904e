use rand::Rng;

use super::{Graph, NumError, Tensor, Var};

/// Row-wise `KL(p ‖ q)` between categoricals given by logits, as `[n, 1]`.
pub fn categorical_kl(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var, NumError> {
    if g.shape(p_logits) != g.shape(q_logits) {
        return Err(NumError::ShapeMismatch {
            op: "categorical_kl",
            left: g.shape(p_logits).to_vec(),
            right: g.shape(q_logits).to_vec(),
        });
    }
    let lp = g.log_softmax(p_logits);
    let lq = g.log_softmax(q_logits);
    let p = g.softmax(p_logits);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    g.sum_axis(terms, 1)
}

/// Row-wise `-log softmax(logits)[label]`, as `[n, 1]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, labels)?;
    Ok(g.scale(picked, -1.0))
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax relaxation with caller-supplied noise (same shape as `logits`).
///
/// With `hard`, the forward value is the one-hot argmax and the gradient is
/// that of the relaxed sample.
pub fn gumbel_softmax_with_noise(
    g: &mut Graph,
    logits: Var,
    noise: Tensor,
    temperature: f64,
    hard: bool,
) -> Result<Var, NumError> {
    if !(temperature > 0.0) {
        return Err(NumError::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let noise = g.constant(noise)?;
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled);
    Ok(if hard { g.straight_through(soft) } else { soft })
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Var, NumError> {
    let shape = g.shape(logits).to_vec();
    let n = g.value(logits).len();
    let noise = Tensor::new(shape, gumbel_noise(rng, n))?;
    gumbel_softmax_with_noise(g, logits, noise, temperature, hard)
}

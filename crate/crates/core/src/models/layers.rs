use crate::numcore::{Graph, NumError, Var};

use super::params::Bound;

/// Linear layers per MLP: two tanh hidden layers and an output layer.
pub(crate) const MLP_LAYERS: usize = 3;

/// `x · W + b` with `W = {prefix}.w`, `b = {prefix}.b`.
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, NumError> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// `tanh` between layers `{prefix}.l0 … {prefix}.l{n-1}`, none after the last.
pub(crate) fn mlp(g: &mut Graph, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var, NumError> {
    let mut h = x;
    for k in 0..layers {
        h = linear(g, p, &format!("{prefix}.l{k}"), h)?;
        if k + 1 < layers {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

/// Declarations matching [`mlp`]: `dims = [in, hidden…, out]`.
pub(crate) fn mlp_decls(prefix: &str, dims: &[usize]) -> Vec<(String, Vec<usize>, usize)> {
    dims.windows(2)
        .enumerate()
        .flat_map(|(k, d)| linear_decls(&format!("{prefix}.l{k}"), d[0], d[1]))
        .collect()
}

pub(crate) fn linear_decls(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<(String, Vec<usize>, usize)> {
    vec![
        (format!("{prefix}.w"), vec![fan_in, fan_out], fan_in),
        (format!("{prefix}.b"), vec![fan_out], fan_in),
    ]
}

/// Gated recurrent cell.
///
/// `z, r = σ([x, h] W_zr + b_zr)`, `n = tanh(x W_n + r ⊙ (h U_n) + b_n)`,
/// `h' = n + z ⊙ (h − n)`.
pub(crate) fn gru_cell(g: &mut Graph, p: &Bound, prefix: &str, x: Var, h: Var, width: usize) -> Result<Var, NumError> {
    let xh = g.concat(&[x, h], 1)?;
    let gates = linear(g, p, &format!("{prefix}.zr"), xh)?;
    let gates = g.sigmoid(gates);
    let z = g.slice(gates, 1, 0, width)?;
    let r = g.slice(gates, 1, width, width)?;
    let xn = linear(g, p, &format!("{prefix}.xn"), x)?;
    let un = p.get(&format!("{prefix}.hn.w"))?;
    let hn = g.matmul(h, un)?;
    let rhn = g.mul(r, hn)?;
    let pre = g.add(xn, rhn)?;
    let n = g.tanh(pre);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

pub(crate) fn gru_decls(prefix: &str, input: usize, width: usize) -> Vec<(String, Vec<usize>, usize)> {
    let mut d = linear_decls(&format!("{prefix}.zr"), input + width, 2 * width);
    d.extend(linear_decls(&format!("{prefix}.xn"), input, width));
    d.push((format!("{prefix}.hn.w"), vec![width, width], width));
    d
}

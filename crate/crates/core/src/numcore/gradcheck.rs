//! Central finite-difference checks of the tape's gradients.

use rand::Rng;

use super::{categorical_kl, cross_entropy, gumbel_noise, gumbel_softmax_with_noise, rng, Graph, NumError, Tensor, Var};

/// Step used by every check.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Below this magnitude errors are compared in absolute terms, since central
/// differences carry roughly `1e-10` of truncation and round-off noise.
const FLOOR: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Builds a scalar loss from parameter nodes created for `inputs`.
pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, NumError> + 'a;

fn eval(f: &LossFn<'_>, inputs: &[Tensor]) -> Result<f64, NumError> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Largest relative error between the tape gradient and central differences
/// with step `h`, over every entry of every input.
pub fn check_gradients(name: &str, inputs: &[Tensor], f: &LossFn<'_>, h: f64) -> Result<GradCheck, NumError> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for idx in 0..probe[k].len() {
            let x0 = probe[k].data()[idx];
            probe[k].data_mut()[idx] = x0 + h;
            let up = eval(f, &probe)?;
            probe[k].data_mut()[idx] = x0 - h;
            let down = eval(f, &probe)?;
            probe[k].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * h);
            let exact = a.data()[idx];
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
    })
}

fn random(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).expect("shape")
}

/// `Σ w ⊙ x` with fixed random weights, turning any tensor into a scalar
/// whose gradient exercises every output entry.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var, NumError> {
    let mut r = rng::stream(seed, &[0x9C4E]);
    let w = random(&mut r, g.shape(x), 1.0);
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// One check per differentiable operation plus a three-layer tanh MLP.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheck>, NumError> {
    let mut r = rng::stream(seed, &[0x6C4C]);
    let a = random(&mut r, &[3, 4], 1.0);
    let b = random(&mut r, &[3, 4], 1.0);
    let m = random(&mut r, &[4, 5], 1.0);
    let bias = random(&mut r, &[4], 1.0);
    let labels = [2usize, 0, 3];
    let noise = Tensor::new(vec![3, 4], gumbel_noise(&mut r, 12))?;
    let s = seed;

    type Case<'a> = (&'static str, Vec<Tensor>, Box<LossFn<'a>>);
    let cases: Vec<Case<'_>> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = g.add(v[0], v[1])?; project(g, y, s) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, s) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, s) })),
        ("add_row", vec![a.clone(), bias.clone()], Box::new(move |g, v| { let y = g.add_row(v[0], v[1])?; project(g, y, s) })),
        ("matmul", vec![a.clone(), m.clone()], Box::new(move |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, s) })),
        ("concat0", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = g.concat(&[v[0], v[1]], 0)?; project(g, y, s) })),
        ("concat1", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; project(g, y, s) })),
        ("slice", vec![a.clone()], Box::new(move |g, v| { let y = g.slice(v[0], 1, 1, 2)?; project(g, y, s) })),
        ("tanh", vec![a.clone()], Box::new(move |g, v| { let y = g.tanh(v[0]); project(g, y, s) })),
        ("sigmoid", vec![a.clone()], Box::new(move |g, v| { let y = g.sigmoid(v[0]); project(g, y, s) })),
        ("scale", vec![a.clone()], Box::new(move |g, v| { let y = g.scale(v[0], -1.7); project(g, y, s) })),
        ("log_softmax", vec![a.clone()], Box::new(move |g, v| { let y = g.log_softmax(v[0]); project(g, y, s) })),
        ("softmax", vec![a.clone()], Box::new(move |g, v| { let y = g.softmax(v[0]); project(g, y, s) })),
        ("sum", vec![a.clone()], Box::new(move |g, v| { let y = g.tanh(v[0]); Ok(g.sum(y)) })),
        ("mean", vec![a.clone()], Box::new(move |g, v| { let y = g.tanh(v[0]); Ok(g.mean(y)) })),
        ("sum_axis0", vec![a.clone()], Box::new(move |g, v| { let y = g.sum_axis(v[0], 0)?; project(g, y, s) })),
        ("sum_axis1", vec![a.clone()], Box::new(move |g, v| { let y = g.sum_axis(v[0], 1)?; project(g, y, s) })),
        ("mean_axis", vec![a.clone()], Box::new(move |g, v| { let y = g.mean_axis(v[0], 0)?; project(g, y, s) })),
        ("embedding", vec![m.clone()], Box::new(move |g, v| { let y = g.embedding(v[0], &[3, 0, 3, 1])?; project(g, y, s) })),
        ("pick", vec![a.clone()], Box::new(move |g, v| { let y = g.pick(v[0], &labels)?; project(g, y, s) })),
        ("masked_max", vec![a.clone(), b.clone()], Box::new(move |g, v| {
            let y = g.masked_max(&[v[0], v[1]], &[true, true, false, true, true, false])?;
            project(g, y, s)
        })),
        ("categorical_kl", vec![a.clone(), b.clone()], Box::new(move |g, v| { let y = categorical_kl(g, v[0], v[1])?; Ok(g.sum(y)) })),
        ("cross_entropy", vec![a.clone()], Box::new(move |g, v| { let y = cross_entropy(g, v[0], &labels)?; Ok(g.sum(y)) })),
        ("gumbel_softmax_relaxed", vec![a.clone()], Box::new(move |g, v| {
            let y = gumbel_softmax_with_noise(g, v[0], noise.clone(), 0.7, false)?;
            project(g, y, s)
        })),
        ("mlp3", vec![random(&mut r, &[5, 3], 1.0), random(&mut r, &[3, 6], 0.8), random(&mut r, &[6, 6], 0.6), random(&mut r, &[6, 2], 0.6)],
            Box::new(move |g, v| {
                let mut h = v[0];
                for (k, &w) in v[1..].iter().enumerate() {
                    h = g.matmul(h, w)?;
                    if k < 2 {
                        h = g.tanh(h);
                    }
                }
                let y = cross_entropy(g, h, &[0, 1, 1, 0, 1])?;
                Ok(g.mean(y))
            })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_gradients(name, &inputs, f.as_ref(), FD_STEP))
        .collect()
}

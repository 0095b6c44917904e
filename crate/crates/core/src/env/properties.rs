//! Exhaustive checks of the two structural properties the learner relies on:
//! every hidden factor has an observed child (P1), and the transition map is
//! a bijection on the state space for each fixed action and noise (P2).

use super::{ActionVector, EnvConfig, EnvError, FactoredState, ModuloEnv, NoiseVector};

const MAX_STATES: usize = 1_000_000;
const MAX_EVALUATIONS: usize = 50_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropertyReport {
    pub states: usize,
    pub maps_checked: usize,
    /// For each hidden factor, its observed children.
    pub observed_children: Vec<(usize, Vec<usize>)>,
}

fn decode(mut code: usize, n: usize, l: usize) -> FactoredState {
    let mut v = vec![0; n];
    for slot in v.iter_mut() {
        *slot = code % l;
        code /= l;
    }
    FactoredState(v)
}

fn encode(s: &FactoredState, l: usize) -> usize {
    s.0.iter().rev().fold(0, |acc, &v| acc * l + v)
}

pub fn verify_properties(cfg: &EnvConfig) -> Result<PropertyReport, EnvError> {
    let env = ModuloEnv::new(cfg.clone())?;
    let (n, l) = (cfg.n_factors, cfg.n_categories);
    let states = l
        .checked_pow(n as u32)
        .filter(|&s| s <= MAX_STATES)
        .ok_or_else(|| EnvError::InvalidConfig(format!("{l}^{n} states exceed the enumeration guard")))?;

    let gt = env.ground_truth_graph();
    let mut observed_children = Vec::new();
    for &h in &cfg.hidden_indices {
        let children: Vec<usize> = env.observed_indices().iter().copied().filter(|&j| gt.edge(h, j)).collect();
        if children.is_empty() {
            return Err(EnvError::PropertyViolation {
                property: "P1",
                detail: format!("hidden factor {h} has no observed child"),
            });
        }
        observed_children.push((h, children));
    }

    let observed = env.observed_indices().to_vec();
    let n_actions = 1usize << observed.len();
    let n_noise = 3usize.pow(n as u32);
    let stride = ((n_actions * n_noise * states) / MAX_EVALUATIONS).max(1);
    let mut seen = vec![usize::MAX; states];
    let mut maps_checked = 0;
    for combo in (0..n_actions * n_noise).step_by(stride) {
        let (abits, mut ecode) = (combo % n_actions, combo / n_actions);
        let mut action = ActionVector::none(n);
        for (b, &f) in observed.iter().enumerate() {
            action.0[f] = ((abits >> b) & 1) as u8;
        }
        let mut eps = NoiseVector::zero(n);
        for e in eps.0.iter_mut() {
            *e = (ecode % 3) as i8 - 1;
            ecode /= 3;
        }
        seen.iter_mut().for_each(|v| *v = usize::MAX);
        for code in 0..states {
            let s = decode(code, n, l);
            let next = encode(&env.step(&s, &action, &eps)?, l);
            if seen[next] != usize::MAX {
                return Err(EnvError::PropertyViolation {
                    property: "P2",
                    detail: format!(
                        "states {:?} and {:?} both map to {:?} under action {:?}, noise {:?}",
                        decode(seen[next], n, l).0,
                        s.0,
                        decode(next, n, l).0,
                        action.0,
                        eps.0
                    ),
                });
            }
            seen[next] = code;
        }
        maps_checked += 1;
    }
    Ok(PropertyReport {
        states,
        maps_checked,
        observed_children,
    })
}

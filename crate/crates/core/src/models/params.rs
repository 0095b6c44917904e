use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::layers::{gru_decls, linear_decls, mlp_decls};
use super::{EncoderVariant, ModelError, ModelSpec};
use crate::numcore::{rng, AdamState, Graph, NumError, Tensor, Var};

pub const THETA_O: &str = "theta_o/";
pub const THETA_H: &str = "theta_h/";
pub const PHI: &str = "phi/";
pub const PHI_BAR: &str = "phi_bar/";
pub const PSI: &str = "psi/";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// Which copy of the encoder the `phi/…` names resolve to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderSource {
    Live,
    /// The detached copy `phi_bar/…`, always bound as constants.
    Target,
}

/// Parameter names resolved to nodes of one graph.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NumError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumError::InvalidArgument(format!("parameter `{name}` is not bound")))
    }

    /// Gradients of every parameter bound as trainable, keyed by store name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.trainable.iter().map(|(n, v)| (n.clone(), g.grad(*v))).collect()
    }
}

/// Every tensor of a model plus its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub spec: ModelSpec,
    pub tensors: BTreeMap<String, Tensor>,
    pub adam: AdamState,
    /// Number of completed optimizer steps.
    pub step: u64,
}

fn encoder_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, usize)> {
    let x = spec.step_input_dim();
    let (h, w) = (spec.recurrent_dim, spec.mlp_width);
    let out = spec.n_hidden() * spec.n_categories;
    let past_in = out + x;
    let mut d = Vec::new();
    match spec.encoder {
        EncoderVariant::History => {
            d.extend(gru_decls("fwd", x, h));
            d.extend(mlp_decls("head", &[h, w, w, out]));
        }
        EncoderVariant::Current1Step => d.extend(mlp_decls("now", &[2 * x, w, w, out])),
        EncoderVariant::CurrentFull => {
            d.extend(gru_decls("bwd", x, h));
            d.extend(mlp_decls("head", &[h, w, w, out]));
        }
        EncoderVariant::Dvae1Step => {
            d.extend(mlp_decls("past", &[past_in, w, w, w]));
            d.push(("ctx".into(), vec![w], w));
            d.extend(mlp_decls("now", &[2 * x, w, w, h]));
            d.extend(mlp_decls("comb", &[w + h, w, w, out]));
        }
        EncoderVariant::DvaeFull => {
            d.extend(mlp_decls("past", &[past_in, w, w, w]));
            d.push(("ctx".into(), vec![w], w));
            d.extend(gru_decls("bwd", x, h));
            d.extend(mlp_decls("comb", &[w + h, w, w, out]));
        }
    }
    d
}

/// Group prefix holding the transition model for next-step factor `j`.
pub(crate) fn transition_prefix(spec: &ModelSpec, j: usize) -> String {
    let group = if spec.is_hidden(j) { THETA_H } else { THETA_O };
    format!("{group}j{j}")
}

fn transition_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, usize)> {
    let (n, l, f, w) = (spec.n_factors, spec.n_categories, spec.feature_dim, spec.mlp_width);
    let mut d = Vec::new();
    for j in 0..n {
        let pre = transition_prefix(spec, j);
        for i in 0..=n {
            let fan_in = if i == n { n } else { l };
            d.extend(linear_decls(&format!("{pre}/in{i}"), fan_in, f));
        }
        d.extend(mlp_decls(&format!("{pre}/head"), &[f, w, w, l]));
    }
    d
}

fn reward_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, usize)> {
    let input = spec.n_hidden() * spec.n_categories + spec.n_categories;
    mlp_decls(&format!("{PSI}head"), &[input, spec.mlp_width, spec.mlp_width, 2])
}

impl ParameterStore {
    /// Trainable parameter declarations, in a fixed order.
    pub fn layout(spec: &ModelSpec) -> Vec<ParamDecl> {
        let mut all: Vec<(String, Vec<usize>, usize)> = transition_layout(spec);
        all.extend(encoder_layout(spec).into_iter().map(|(n, s, f)| (format!("{PHI}{n}"), s, f)));
        all.extend(reward_layout(spec));
        all.into_iter()
            .map(|(name, shape, fan_in)| ParamDecl { name, shape, fan_in })
            .collect()
    }

    /// Uniform `±1/√fan_in` initialization; `phi_bar` starts equal to `phi`.
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, decl) in Self::layout(&spec).into_iter().enumerate() {
            let mut r = rng::stream(seed, &[0x1417, k as u64]);
            let bound = 1.0 / (decl.fan_in.max(1) as f64).sqrt();
            let n: usize = decl.shape.iter().product();
            let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
            tensors.insert(decl.name, Tensor::new(decl.shape, data).expect("declared shape"));
        }
        let mut store = Self {
            spec,
            tensors,
            adam: AdamState::default(),
            step: 0,
        };
        store.sync_target();
        store
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with(PHI_BAR)
    }

    /// Names the optimizer may update.
    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| Self::is_trainable(n))
    }

    /// Overwrites every `phi_bar/…` tensor with its `phi/…` counterpart.
    pub fn sync_target(&mut self) {
        let copies: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(PHI).map(|rest| (format!("{PHI_BAR}{rest}"), t.clone())))
            .collect();
        self.tensors.extend(copies);
    }

    pub fn group(&self, prefix: &str) -> impl Iterator<Item = (&String, &Tensor)> + '_ {
        let prefix = prefix.to_string();
        self.tensors.iter().filter(move |(n, _)| n.starts_with(&prefix))
    }

    /// Binds the transition model, reward head, and the encoder copy chosen
    /// by `source` onto `g`. With `trainable`, live tensors become gradient
    /// leaves; `phi_bar` is always constant.
    pub fn bind(&self, g: &mut Graph, source: EncoderSource, trainable: bool) -> Result<Bound, ModelError> {
        let mut b = Bound::default();
        for (name, t) in &self.tensors {
            if name.starts_with(PHI_BAR) || (name.starts_with(PHI) && source == EncoderSource::Target) {
                continue;
            }
            let v = if trainable { g.param(t.clone())? } else { g.constant(t.clone())? };
            if trainable {
                b.trainable.push((name.clone(), v));
            }
            b.vars.insert(name.clone(), v);
        }
        if source == EncoderSource::Target {
            self.bind_target_encoder_into(g, &mut b)?;
        }
        Ok(b)
    }

    /// Only the detached encoder, under `phi/…` names, as constants.
    pub fn bind_target_encoder(&self, g: &mut Graph) -> Result<Bound, ModelError> {
        let mut b = Bound::default();
        self.bind_target_encoder_into(g, &mut b)?;
        Ok(b)
    }

    fn bind_target_encoder_into(&self, g: &mut Graph, b: &mut Bound) -> Result<(), ModelError> {
        for (name, t) in self.group(PHI_BAR) {
            let v = g.constant(t.clone())?;
            b.vars.insert(format!("{PHI}{}", &name[PHI_BAR.len()..]), v);
        }
        Ok(())
    }

    /// Checks that `other` has exactly this store's tensor names and shapes.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<(), ModelError> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => {
                    return Err(ModelError::Mismatch {
                        name: name.clone(),
                        detail: "missing".into(),
                    })
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(ModelError::Mismatch {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected {:?}", o.shape(), t.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(ModelError::Mismatch {
                name: extra.clone(),
                detail: "unexpected tensor".into(),
            });
        }
        Ok(())
    }
}

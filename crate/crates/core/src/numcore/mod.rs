//! Dense `f64` tensors, a reverse-mode tape, Adam, and categorical helpers.
//!
//! ```
//! use hindcaus::numcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![2.0])).unwrap();
//! let y = g.param(Tensor::from_vec(vec![3.0])).unwrap();
//! let xy = g.mul(x, y).unwrap();
//! let loss = g.sum(xy);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).data(), &[3.0]);
//! assert_eq!(g.grad(y).data(), &[2.0]);
//! ```

mod adam;
mod dist;
pub mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use adam::{adam_step, AdamState, Moments};
pub use dist::{categorical_kl, cross_entropy, gumbel_noise, gumbel_softmax_sample, gumbel_softmax_with_noise};
pub use graph::{Graph, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite values entering {0}")]
    NonFinite(String),
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
}

//! Hidden-state identification and causal transition-graph learning for
//! factored POMDPs from offline trajectories.
//!
//! The pieces, in data-flow order: [`env`] generates episodes of the modulo
//! environment, [`models`] holds the encoders and the masked transition
//! model, [`objective`] builds the training loss, [`graph`] estimates CMI and
//! binarizes it, [`trainer`] runs the loop, and [`eval`] scores runs.
//! [`numcore`] is the tensor and autodiff layer underneath.

pub mod env;
pub mod eval;
pub mod graph;
pub mod models;
pub mod numcore;
pub mod objective;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/causal_graph.md")]
    mod causal_graph {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

//! Counterfactual explanations for agents acting in small grid worlds.
//!
//! An episode is rolled out ([`envs`]), every observed object is masked in
//! turn to measure how much it moves each policy's action distribution
//! ([`counterfactual`]), those scores become a layered influence graph
//! ([`graph`]), and max-flow queries over the graph pick the cause and effect
//! that fill a one-sentence template ([`explain`]). [`session`] stores
//! episodes and re-simulates them under what-if edits.

pub mod counterfactual;
pub mod envs;
pub mod explain;
pub mod graph;
pub mod model;
pub mod session;

pub use counterfactual::{js_divergence, CounterfactualError, InfluenceScore, Node};
pub use envs::{env_by_name, rollout, Controllers, EnvError, Environment, Episode, WorldState};
pub use explain::{
    important_steps, render_explanation, ExplainError, Explanation, Lexicon, LexiconError,
};
pub use graph::{
    build_graph, max_flow, max_weight_path, top_cause, top_effect, GraphError, InfluenceGraph,
};
pub use model::{
    ActionDistribution, ModelError, ObjectClass, ObjectId, ObjectSnapshot, Observation,
};
pub use session::{what_if, CounterfactualRollout, SessionError, WhatIfEdit};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

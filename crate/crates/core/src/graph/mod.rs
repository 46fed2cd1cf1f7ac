//! Layered influence graph over an episode.
//!
//! Layer `t` holds one node per object alive in frame `t`. An influence edge
//! `(i, t-1) -> (j, t)` carries the divergence of `j`'s decision on its
//! history up to `t-1` when `i` is masked from frame `t-1` only. Controllable
//! agents also get weight-1 persistence edges between their consecutive
//! nodes so influence can route through an agent's own past.

mod flow;
mod query;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::counterfactual::Node;
use crate::counterfactual::{influence, CounterfactualError, FactualCache};
use crate::envs::{Controllers, EnvError, Episode, ObservationLog};
use crate::model::ObjectId;

pub use flow::{max_flow, max_weight_path, FlowResult, WeightedPath};
pub use query::{all_causes, top_cause, top_effect, RankedNode};

pub const DEFAULT_XI: f64 = 0.05;
/// Tolerance used when comparing flow values and path weights.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("xi must lie in [0, 1), got {0}")]
    InvalidXi(f64),
    #[error("episode is not replayable: {0}")]
    NonReplayableEpisode(String),
    #[error("node {0} is not in the graph")]
    NodeNotFound(Node),
    #[error("source {from} must precede sink {to}")]
    BadDirection { from: Node, to: Node },
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Influence,
    Persistence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawGraph {
    xi: f64,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    eval_count: u64,
    policy_evaluations: u64,
}

/// The influence DAG. Nodes are sorted by (step, id) and edges by
/// (target, source), so equal graphs serialise to equal bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "RawGraph", try_from = "RawGraph")]
pub struct InfluenceGraph {
    pub xi: f64,
    layers: Vec<Vec<ObjectId>>,
    edges: Vec<Edge>,
    /// Masked histories constructed, one per (object, step) intervention.
    pub eval_count: u64,
    /// Policy calls made, factual and masked.
    pub policy_evaluations: u64,
    index: Index,
}

#[derive(Debug, Clone, Default)]
struct Index {
    nodes: Vec<Node>,
    position: HashMap<Node, usize>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl PartialEq for InfluenceGraph {
    fn eq(&self, other: &Self) -> bool {
        self.xi == other.xi
            && self.layers == other.layers
            && self.edges == other.edges
            && self.eval_count == other.eval_count
            && self.policy_evaluations == other.policy_evaluations
    }
}

impl From<InfluenceGraph> for RawGraph {
    fn from(g: InfluenceGraph) -> Self {
        RawGraph {
            xi: g.xi,
            nodes: g.index.nodes,
            edges: g.edges,
            eval_count: g.eval_count,
            policy_evaluations: g.policy_evaluations,
        }
    }
}

impl TryFrom<RawGraph> for InfluenceGraph {
    type Error = GraphError;

    fn try_from(raw: RawGraph) -> Result<Self, GraphError> {
        let depth = raw
            .nodes
            .iter()
            .map(|n| n.step as usize + 1)
            .max()
            .unwrap_or(0);
        let mut layers = vec![Vec::new(); depth];
        for n in raw.nodes {
            layers[n.step as usize].push(n.object_id);
        }
        let mut g = InfluenceGraph::from_parts(raw.xi, layers, raw.edges)?;
        g.eval_count = raw.eval_count;
        g.policy_evaluations = raw.policy_evaluations;
        Ok(g)
    }
}

impl InfluenceGraph {
    /// Assembles a graph from explicit layers and edges, checking that edges
    /// join adjacent layers, reference existing nodes and weigh in (xi, 1].
    pub fn from_parts(
        xi: f64,
        mut layers: Vec<Vec<ObjectId>>,
        mut edges: Vec<Edge>,
    ) -> Result<Self, GraphError> {
        check_xi(xi)?;
        for layer in &mut layers {
            layer.sort();
            if layer.windows(2).any(|w| w[0] == w[1]) {
                return Err(GraphError::Malformed("duplicate node in a layer".into()));
            }
        }
        let mut index = Index::default();
        for (t, layer) in layers.iter().enumerate() {
            for id in layer {
                let node = Node::new(id.clone(), t as u32);
                index.position.insert(node.clone(), index.nodes.len());
                index.nodes.push(node);
            }
        }
        index.outgoing = vec![Vec::new(); index.nodes.len()];
        index.incoming = vec![Vec::new(); index.nodes.len()];
        edges.sort_by(|a, b| (&a.to, &a.from).cmp(&(&b.to, &b.from)));
        for (k, e) in edges.iter().enumerate() {
            if e.from.step + 1 != e.to.step {
                return Err(GraphError::Malformed(format!(
                    "edge {} -> {} skips layers",
                    e.from, e.to
                )));
            }
            if !(e.weight > xi && e.weight <= 1.0) {
                return Err(GraphError::Malformed(format!(
                    "edge {} -> {} has weight {} outside (xi, 1]",
                    e.from, e.to, e.weight
                )));
            }
            if k > 0 && edges[k - 1].from == e.from && edges[k - 1].to == e.to {
                return Err(GraphError::Malformed(format!(
                    "duplicate edge {} -> {}",
                    e.from, e.to
                )));
            }
            let (Some(&u), Some(&v)) = (index.position.get(&e.from), index.position.get(&e.to))
            else {
                return Err(GraphError::Malformed(format!(
                    "edge {} -> {} references a missing node",
                    e.from, e.to
                )));
            };
            index.outgoing[u].push(k);
            index.incoming[v].push(k);
        }
        Ok(InfluenceGraph {
            xi,
            layers,
            edges,
            eval_count: 0,
            policy_evaluations: 0,
            index,
        })
    }

    pub fn layers(&self) -> &[Vec<ObjectId>] {
        &self.layers
    }

    /// Nodes in (step, id) order.
    pub fn nodes(&self) -> &[Node] {
        &self.index.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Index of the last layer.
    pub fn last_step(&self) -> Option<u32> {
        self.layers.len().checked_sub(1).map(|t| t as u32)
    }

    pub fn contains(&self, node: &Node) -> bool {
        self.index.position.contains_key(node)
    }

    pub fn incoming(&self, node: &Node) -> impl Iterator<Item = &Edge> {
        self.index
            .position
            .get(node)
            .into_iter()
            .flat_map(move |&i| self.index.incoming[i].iter().map(move |&k| &self.edges[k]))
    }

    pub fn outgoing(&self, node: &Node) -> impl Iterator<Item = &Edge> {
        self.index
            .position
            .get(node)
            .into_iter()
            .flat_map(move |&i| self.index.outgoing[i].iter().map(move |&k| &self.edges[k]))
    }

    /// Sum of influence (not persistence) weights entering `node`.
    pub fn importance(&self, node: &Node) -> f64 {
        self.incoming(node)
            .filter(|e| e.kind == EdgeKind::Influence)
            .map(|e| e.weight)
            .sum()
    }

    pub fn influence_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Influence)
            .count()
    }

    /// The graph as seen from one agent's decisions: persistence edges of
    /// every other agent are dropped so influence cannot pile up along
    /// bystanders' timelines.
    pub fn agent_view(&self, agent: &ObjectId) -> InfluenceGraph {
        let edges = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Influence || &e.from.object_id == agent)
            .cloned()
            .collect();
        let mut g = InfluenceGraph::from_parts(self.xi, self.layers.clone(), edges)
            .expect("a view of a valid graph is valid");
        g.eval_count = self.eval_count;
        g.policy_evaluations = self.policy_evaluations;
        g
    }

    /// The [`agent_view`](Self::agent_view) used to rank causes of
    /// `decision`: the persistence edge entering the decision is dropped as
    /// well, so every route ends with an outside object's influence.
    pub fn cause_view(&self, decision: &Node) -> InfluenceGraph {
        let mut g = self.agent_view(&decision.object_id);
        let before = g.edges.len();
        g.edges
            .retain(|e| !(e.kind == EdgeKind::Persistence && &e.to == decision));
        if g.edges.len() == before {
            return g;
        }
        let mut view = InfluenceGraph::from_parts(self.xi, g.layers, g.edges)
            .expect("a view of a valid graph is valid");
        view.eval_count = self.eval_count;
        view.policy_evaluations = self.policy_evaluations;
        view
    }

    /// Layers `from..=to` with the edges between them.
    pub fn subgraph(&self, from: u32, to: u32) -> InfluenceGraph {
        let to = to.min(self.last_step().unwrap_or(0));
        let layers: Vec<Vec<ObjectId>> = (0..self.layers.len())
            .map(|t| {
                if (from as usize..=to as usize).contains(&t) {
                    self.layers[t].clone()
                } else {
                    Vec::new()
                }
            })
            .take(to as usize + 1)
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| e.from.step >= from && e.to.step <= to)
            .cloned()
            .collect();
        let mut g = InfluenceGraph::from_parts(self.xi, layers, edges)
            .expect("a subgraph of a valid graph is valid");
        g.eval_count = self.eval_count;
        g.policy_evaluations = self.policy_evaluations;
        g
    }

    /// Graphviz rendering; pen width tracks edge weight.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph influence {\n  rankdir=LR;\n  node [shape=box];\n");
        for (t, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "  subgraph cluster_{t} {{\n    label=\"t={t}\";\n"
            ));
            for id in layer {
                out.push_str(&format!("    \"{id}@{t}\" [label=\"{id}\"];\n"));
            }
            out.push_str("  }\n");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Influence => "solid",
                EdgeKind::Persistence => "dashed",
            };
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [label=\"{:.3}\", penwidth={:.2}, style={style}];\n",
                e.from,
                e.to,
                e.weight,
                0.5 + 4.0 * e.weight
            ));
        }
        out.push_str("}\n");
        out
    }

    fn node_index(&self, node: &Node) -> Result<usize, GraphError> {
        self.index
            .position
            .get(node)
            .copied()
            .ok_or_else(|| GraphError::NodeNotFound(node.clone()))
    }
}

fn check_xi(xi: f64) -> Result<(), GraphError> {
    if (0.0..1.0).contains(&xi) {
        Ok(())
    } else {
        Err(GraphError::InvalidXi(xi))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    LayerLocal,
    Naive,
}

/// Builds the influence graph with layer-local masking: each object alive
/// at `t-1` is masked once, in frame `t-1` only, for the layer-`t` edges.
pub fn build_graph(
    episode: &Episode,
    controllers: &Controllers,
    xi: f64,
) -> Result<InfluenceGraph, GraphError> {
    build(episode, controllers, xi, Mode::LayerLocal)
}

/// Baseline that, for every decision layer, re-masks every object in every
/// frame since the episode start. Produces the same edges at quadratic cost.
pub fn build_graph_naive(
    episode: &Episode,
    controllers: &Controllers,
    xi: f64,
) -> Result<InfluenceGraph, GraphError> {
    build(episode, controllers, xi, Mode::Naive)
}

fn build(
    episode: &Episode,
    controllers: &Controllers,
    xi: f64,
    mode: Mode,
) -> Result<InfluenceGraph, GraphError> {
    check_xi(xi)?;
    episode.verify_replay().map_err(|e| match e {
        EnvError::NonReplayable(msg) => GraphError::NonReplayableEpisode(msg),
        other => GraphError::NonReplayableEpisode(other.to_string()),
    })?;
    let env = episode.env()?;
    let log = ObservationLog::from_frames(env, &episode.frames);
    let cache = FactualCache::new();
    let layers: Vec<Vec<ObjectId>> = episode
        .frames
        .iter()
        .map(|f| f.entities.iter().map(|e| e.object_id.clone()).collect())
        .collect();

    let mut edges = Vec::new();
    let mut eval_count = 0u64;
    let mut policy_evaluations = 0u64;
    for t in 1..episode.frames.len() {
        let prev = &episode.frames[t - 1];
        let here = &episode.frames[t];
        let decision_step = prev.step;

        let mut targets = Vec::new();
        for entity in prev.entities.iter().filter(|e| here.is_alive(&e.object_id)) {
            let Some(policy) = controllers.policy_for(entity) else {
                continue;
            };
            let hist = log
                .history(&entity.object_id, decision_step)
                .ok_or_else(|| {
                    CounterfactualError::MissingHistory(entity.object_id.clone(), decision_step)
                })?;
            targets.push((entity.object_id.clone(), policy, hist));
            if controllers.agent(&entity.object_id).is_some() {
                edges.push(Edge {
                    from: Node::new(entity.object_id.clone(), decision_step),
                    to: Node::new(entity.object_id.clone(), here.step),
                    weight: 1.0,
                    kind: EdgeKind::Persistence,
                });
            }
        }
        policy_evaluations += targets.len() as u64;

        let masked_steps = match mode {
            Mode::LayerLocal => decision_step..=decision_step,
            Mode::Naive => 0..=decision_step,
        };
        for s in masked_steps {
            for object in &episode.frames[s as usize].entities {
                eval_count += 1;
                for (viewer, policy, hist) in &targets {
                    if viewer == &object.object_id {
                        continue;
                    }
                    let visible = hist
                        .frame_at(s)
                        .is_some_and(|o| o.is_visible(&object.object_id));
                    if !visible {
                        continue;
                    }
                    let score = influence(policy.as_ref(), hist, &object.object_id, s, &cache)?;
                    policy_evaluations += 1;
                    if s == decision_step && score.value > xi {
                        edges.push(Edge {
                            from: score.source,
                            to: score.target,
                            weight: score.value,
                            kind: EdgeKind::Influence,
                        });
                    }
                }
            }
        }
    }

    let mut graph = InfluenceGraph::from_parts(xi, layers, edges)?;
    graph.eval_count = eval_count;
    graph.policy_evaluations = policy_evaluations;
    Ok(graph)
}

//! Max flow (Edmonds-Karp over real capacities) and maximum-weight paths
//! between two nodes of an influence graph.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, InfluenceGraph, TOLERANCE};
use crate::counterfactual::Node;
use crate::model::ObjectId;

/// Residual capacities below this count as exhausted.
const RESIDUAL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub value: f64,
    /// A minimum cut: saturated edges whose weights sum to `value`.
    pub saturated_edges: Vec<Edge>,
}

impl FlowResult {
    fn zero() -> Self {
        FlowResult {
            value: 0.0,
            saturated_edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPath {
    /// Source first, sink last; empty when the sink is unreachable.
    pub nodes: Vec<Node>,
    pub weight: f64,
}

impl WeightedPath {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub(super) fn check_pair(
    g: &InfluenceGraph,
    source: &Node,
    sink: &Node,
) -> Result<(usize, usize), GraphError> {
    let s = g.node_index(source)?;
    let t = g.node_index(sink)?;
    if source.step >= sink.step {
        return Err(GraphError::BadDirection {
            from: source.clone(),
            to: sink.clone(),
        });
    }
    Ok((s, t))
}

/// Node indices reachable from `start` along edges (forward) or against
/// them (backward), never leaving steps within `bounds`.
pub(super) fn reach(
    g: &InfluenceGraph,
    start: usize,
    forward: bool,
    bounds: (u32, u32),
) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let arcs = if forward {
            &g.index.outgoing[u]
        } else {
            &g.index.incoming[u]
        };
        for &k in arcs {
            let e = &g.edges[k];
            let next = if forward { &e.to } else { &e.from };
            if next.step < bounds.0 || next.step > bounds.1 {
                continue;
            }
            let v = g.index.position[next];
            if seen.insert(v) {
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Nodes lying on some source -> sink path.
fn corridor(g: &InfluenceGraph, s: usize, t: usize) -> BTreeSet<usize> {
    let bounds = (g.index.nodes[s].step, g.index.nodes[t].step);
    let down = reach(g, s, true, bounds);
    if !down.contains(&t) {
        return BTreeSet::new();
    }
    let up = reach(g, t, false, bounds);
    down.intersection(&up).copied().collect()
}

struct Arc {
    to: usize,
    residual: f64,
    edge: Option<usize>,
}

pub fn max_flow(g: &InfluenceGraph, source: &Node, sink: &Node) -> Result<FlowResult, GraphError> {
    let (s, t) = check_pair(g, source, sink)?;
    let nodes: Vec<usize> = corridor(g, s, t).into_iter().collect();
    if nodes.is_empty() {
        return Ok(FlowResult::zero());
    }
    let local = |global: usize| nodes.binary_search(&global).ok();
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for &u in &nodes {
        for &k in &g.index.outgoing[u] {
            let Some(v) = local(g.index.position[&g.edges[k].to]) else {
                continue;
            };
            let u = local(u).expect("u is in the corridor");
            adjacency[u].push(arcs.len());
            arcs.push(Arc {
                to: v,
                residual: g.edges[k].weight,
                edge: Some(k),
            });
            adjacency[v].push(arcs.len());
            arcs.push(Arc {
                to: u,
                residual: 0.0,
                edge: None,
            });
        }
    }
    let (ls, lt) = (local(s).unwrap(), local(t).unwrap());

    let mut value = 0.0;
    loop {
        let parent = bfs(&arcs, &adjacency, ls);
        if parent[lt].is_none() {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = lt;
        while v != ls {
            let a = parent[v].expect("on the path");
            bottleneck = bottleneck.min(arcs[a].residual);
            v = arcs[a ^ 1].to;
        }
        let mut v = lt;
        while v != ls {
            let a = parent[v].expect("on the path");
            arcs[a].residual -= bottleneck;
            arcs[a ^ 1].residual += bottleneck;
            v = arcs[a ^ 1].to;
        }
        value += bottleneck;
    }

    let parent = bfs(&arcs, &adjacency, ls);
    let source_side = |v: usize| v == ls || parent[v].is_some();
    let mut saturated_edges: Vec<Edge> = arcs
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let k = a.edge?;
            let from = arcs[i ^ 1].to;
            (source_side(from) && !source_side(a.to)).then(|| g.edges[k].clone())
        })
        .collect();
    saturated_edges.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
    Ok(FlowResult {
        value,
        saturated_edges,
    })
}

/// Shortest augmenting paths: parent arc per reached node.
fn bfs(arcs: &[Arc], adjacency: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut parent = vec![None; adjacency.len()];
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &a in &adjacency[u] {
            let v = arcs[a].to;
            if v != start && parent[v].is_none() && arcs[a].residual > RESIDUAL_EPSILON {
                parent[v] = Some(a);
                queue.push_back(v);
            }
        }
    }
    parent
}

/// The source -> sink path with the largest total weight. Ties (within
/// [`TOLERANCE`]) go to the lexicographically smallest object-id sequence.
pub fn max_weight_path(
    g: &InfluenceGraph,
    source: &Node,
    sink: &Node,
) -> Result<WeightedPath, GraphError> {
    let (s, t) = check_pair(g, source, sink)?;
    let nodes = corridor(g, s, t);
    if nodes.is_empty() {
        return Ok(WeightedPath {
            nodes: Vec::new(),
            weight: 0.0,
        });
    }
    // best[v] = (weight, path from v to the sink)
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; g.index.nodes.len()];
    best[t] = Some((0.0, vec![t]));
    // indices are in (step, id) order, so reverse order visits later layers first
    for &u in nodes.iter().rev().filter(|&&u| u != t) {
        let mut choice: Option<(f64, Vec<usize>)> = None;
        for &k in &g.index.outgoing[u] {
            let v = g.index.position[&g.edges[k].to];
            let Some((w, tail)) = &best[v] else {
                continue;
            };
            let total = g.edges[k].weight + w;
            let better = match &choice {
                None => true,
                Some((cw, ctail)) => {
                    total > cw + TOLERANCE
                        || ((total - cw).abs() <= TOLERANCE && ids(g, tail) < ids(g, ctail))
                }
            };
            if better {
                choice = Some((total, tail.clone()));
            }
        }
        if let Some((w, tail)) = choice {
            let mut path = Vec::with_capacity(tail.len() + 1);
            path.push(u);
            path.extend(tail);
            best[u] = Some((w, path));
        }
    }
    let (weight, path) = best[s].take().expect("source lies in the corridor");
    Ok(WeightedPath {
        nodes: path.into_iter().map(|i| g.index.nodes[i].clone()).collect(),
        weight,
    })
}

fn ids<'a>(g: &'a InfluenceGraph, path: &[usize]) -> Vec<&'a ObjectId> {
    path.iter().map(|&i| &g.index.nodes[i].object_id).collect()
}

//! Cause and effect queries: which node sends the most flow into a
//! decision, and which later node receives the most flow from it.

use serde::{Deserialize, Serialize};

use super::flow::{max_flow, reach, FlowResult};
use super::{GraphError, InfluenceGraph, TOLERANCE};
use crate::counterfactual::Node;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNode {
    pub node: Node,
    pub flow: FlowResult,
}

/// Highest flow first; ties (within [`TOLERANCE`]) by latest step, then
/// smallest object id.
fn rank(mut scored: Vec<RankedNode>) -> Vec<RankedNode> {
    scored.retain(|r| r.flow.value > TOLERANCE);
    scored.sort_by(|a, b| {
        b.flow
            .value
            .total_cmp(&a.flow.value)
            .then_with(|| b.node.step.cmp(&a.node.step))
            .then_with(|| a.node.object_id.cmp(&b.node.object_id))
    });
    let Some(top) = scored.first().map(|r| r.flow.value) else {
        return scored;
    };
    // re-order the leading near-tie block by the tie rule alone
    let tied = scored
        .iter()
        .take_while(|r| top - r.flow.value <= TOLERANCE)
        .count();
    scored[..tied].sort_by(|a, b| {
        b.node
            .step
            .cmp(&a.node.step)
            .then_with(|| a.node.object_id.cmp(&b.node.object_id))
    });
    scored
}

fn causes(g: &InfluenceGraph, decision: &Node) -> Result<Vec<RankedNode>, GraphError> {
    g.node_index(decision)?;
    let g = &g.cause_view(decision);
    let d = g.node_index(decision)?;
    let ancestors = reach(g, d, false, (0, decision.step));
    let mut scored = Vec::new();
    for a in ancestors {
        let node = &g.index.nodes[a];
        if node.object_id == decision.object_id {
            continue;
        }
        scored.push(RankedNode {
            node: node.clone(),
            flow: max_flow(g, node, decision)?,
        });
    }
    Ok(rank(scored))
}

/// The earlier node, other than the decision-maker's own, with the largest
/// max flow into `decision` within [`InfluenceGraph::cause_view`]. `None`
/// when nothing sends flow.
pub fn top_cause(g: &InfluenceGraph, decision: &Node) -> Result<Option<RankedNode>, GraphError> {
    Ok(causes(g, decision)?.into_iter().next())
}

/// Every cause with flow above `min_flow`, best first.
pub fn all_causes(
    g: &InfluenceGraph,
    decision: &Node,
    min_flow: f64,
) -> Result<Vec<RankedNode>, GraphError> {
    let mut ranked = causes(g, decision)?;
    ranked.retain(|r| r.flow.value > min_flow);
    Ok(ranked)
}

/// The node within `horizon` layers after `decision`, other than the
/// decision-maker's own, receiving the largest max flow from it.
pub fn top_effect(
    g: &InfluenceGraph,
    decision: &Node,
    horizon: u32,
) -> Result<Option<RankedNode>, GraphError> {
    if horizon == 0 {
        return Err(GraphError::BadHorizon);
    }
    g.node_index(decision)?;
    let g = &g.agent_view(&decision.object_id);
    let d = g.node_index(decision)?;
    let descendants = reach(
        g,
        d,
        true,
        (decision.step, decision.step.saturating_add(horizon)),
    );
    let mut scored = Vec::new();
    for v in descendants {
        let node = &g.index.nodes[v];
        if node.object_id == decision.object_id {
            continue;
        }
        scored.push(RankedNode {
            node: node.clone(),
            flow: max_flow(g, decision, node)?,
        });
    }
    Ok(rank(scored).into_iter().next())
}

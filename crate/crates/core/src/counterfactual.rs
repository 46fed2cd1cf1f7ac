//! Counterfactual influence: how far an entity's action distribution moves
//! when one object is masked out of its observation history, measured as a
//! base-2 Jensen-Shannon divergence so every score lies in [0, 1].
//!
//! Node convention: the decision an entity makes on its observation at step
//! `s` is the node `(entity, s + 1)`, the step at which that behaviour shows
//! up in the world. A source object masked at step `s` therefore always
//! precedes its target.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Controllers, EnvError, ObservationLog, WorldState};
use crate::model::{
    mask_history, ActionDistribution, ModelError, ObjectId, ObservationHistory, Policy,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CounterfactualError {
    #[error("action sets differ: {left:?} vs {right:?}")]
    ActionSetMismatch {
        left: Vec<String>,
        right: Vec<String>,
    },
    #[error("`{0}` cannot influence itself")]
    SelfInfluence(ObjectId),
    #[error("no observation history for `{0}` at step {1}")]
    MissingHistory(ObjectId, u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// An object at a time step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Node {
    pub object_id: ObjectId,
    pub step: u32,
}

impl Node {
    pub fn new(object_id: impl Into<ObjectId>, step: u32) -> Self {
        Node {
            object_id: object_id.into(),
            step,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.object_id, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub source: Node,
    pub target: Node,
    pub value: f64,
}

/// Jensen-Shannon divergence in bits. Zero-probability terms contribute 0.
pub fn js_divergence(
    p: &ActionDistribution,
    q: &ActionDistribution,
) -> Result<f64, CounterfactualError> {
    if p.action_set != q.action_set {
        return Err(CounterfactualError::ActionSetMismatch {
            left: p.action_set.clone(),
            right: q.action_set.clone(),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probabilities.iter().zip(&q.probabilities) {
        let m = 0.5 * (pi + qi);
        let from_p = if pi > 0.0 { pi * (pi / m).log2() } else { 0.0 };
        let from_q = if qi > 0.0 { qi * (qi / m).log2() } else { 0.0 };
        // the pair sum is order independent, which keeps D(p, q) == D(q, p)
        total += 0.5 * (from_p + from_q);
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Factual action distributions keyed by (policy id, viewer, step).
///
/// A cache belongs to one episode: keys do not identify the history, only
/// its position. Fills are idempotent so racing writers agree.
#[derive(Debug, Default)]
pub struct FactualCache {
    entries: RwLock<HashMap<(String, ObjectId, u32), Arc<ActionDistribution>>>,
}

impl FactualCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &self,
        policy: &dyn Policy,
        history: &ObservationHistory,
    ) -> Arc<ActionDistribution> {
        let key = (
            policy.id().to_owned(),
            history.viewer_id.clone(),
            history.last_step().unwrap_or(0),
        );
        if let Some(hit) = self.entries.read().get(&key) {
            return hit.clone();
        }
        let dist = Arc::new(policy.act(history));
        self.entries.write().entry(key).or_insert(dist).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Influence of `object`, masked at `masked_step`, on the decision the
/// history's viewer makes at its last step.
pub fn influence(
    policy: &dyn Policy,
    hist: &ObservationHistory,
    object: &ObjectId,
    masked_step: u32,
    cache: &FactualCache,
) -> Result<InfluenceScore, CounterfactualError> {
    let factual = cache.get_or_compute(policy, hist);
    let masked = mask_history(hist, object, masked_step)?;
    let counterfactual = policy.act(&masked);
    let last = hist.last_step().unwrap_or(0);
    Ok(InfluenceScore {
        source: Node::new(object.clone(), masked_step),
        target: Node::new(hist.viewer_id.clone(), last + 1),
        value: js_divergence(&factual, &counterfactual)?,
    })
}

/// Influence of `actor`, present at `state.step`, on `other`'s next
/// behaviour. An actor the other cannot see scores 0.
pub fn effect_influence(
    controllers: &Controllers,
    state: &WorldState,
    actor: &ObjectId,
    other: &ObjectId,
    histories: &ObservationLog,
) -> Result<InfluenceScore, CounterfactualError> {
    if actor == other {
        return Err(CounterfactualError::SelfInfluence(actor.clone()));
    }
    for id in [actor, other] {
        let entity = state
            .entity(id)
            .ok_or_else(|| EnvError::DeadEntity(id.clone()))?;
        if !entity.dynamic {
            return Err(EnvError::StaticEntity(id.clone()).into());
        }
    }
    let policy = controllers
        .policy_for(state.entity(other).expect("checked above"))
        .ok_or_else(|| EnvError::StaticEntity(other.clone()))?;
    let hist = histories
        .history(other, state.step)
        .ok_or_else(|| CounterfactualError::MissingHistory(other.clone(), state.step))?;
    let source = Node::new(actor.clone(), state.step);
    let target = Node::new(other.clone(), state.step + 1);
    let visible = hist.latest().is_some_and(|o| o.is_visible(actor));
    if !visible {
        return Ok(InfluenceScore {
            source,
            target,
            value: 0.0,
        });
    }
    let factual = policy.act(&hist);
    let masked = policy.act(&mask_history(&hist, actor, state.step)?);
    Ok(InfluenceScore {
        source,
        target,
        value: js_divergence(&factual, &masked)?,
    })
}

//! Template explanations:
//! "I observed {cause} is {behavior}, so I {decision} to {purpose}."

mod lexicon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::Node;
use crate::envs::Episode;
use crate::graph::{max_weight_path, top_cause, top_effect, GraphError, InfluenceGraph};
use crate::model::{attr, ObjectId, ObjectSnapshot};

pub use lexicon::{ClassPhrases, Lexicon, LexiconError, PurposeRule, PATTERNS};

pub const DEFAULT_HORIZON: u32 = 3;
pub const NO_CAUSE: &str = "no observed object changed this decision";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExplainError {
    #[error("agent `{agent}` is not alive at step {step}")]
    AgentDead { agent: ObjectId, step: u32 },
    #[error("step {step} is outside the episode's {steps} decision steps")]
    StepOutOfRange { step: u32, steps: u32 },
    #[error("lexicon has no entry for {0}")]
    LexiconMiss(String),
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("path is empty")]
    EmptyPath,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

/// An object named in an explanation with its phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub object: Node,
    pub noun: String,
    pub descriptor: String,
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: String,
    pub verb: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    #[serde(flatten)]
    pub mention: Mention,
    pub pattern: String,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub agent_id: ObjectId,
    /// Decision step: the frame the agent acted on.
    pub step: u32,
    pub cause: Option<Mention>,
    pub decision: Decision,
    pub effect: Option<Effect>,
    pub cause_path: Vec<Node>,
    pub effect_path: Vec<Node>,
    pub rendered: String,
}

/// The graph node holding the behaviour chosen at decision step `step`.
pub fn decision_node(agent: &ObjectId, step: u32) -> Node {
    Node::new(agent.clone(), step + 1)
}

fn snapshot<'a>(episode: &'a Episode, id: &ObjectId, step: u32) -> Option<&'a ObjectSnapshot> {
    episode.frame(step)?.entity(id)
}

/// Phrase for how `object` changed between `from` and `to`, using the
/// first and last frames in that range where it is alive.
pub fn describe_object(
    episode: &Episode,
    lexicon: &Lexicon,
    object: &ObjectId,
    from: u32,
    to: u32,
) -> Result<String, ExplainError> {
    let alive: Vec<&ObjectSnapshot> = (from..=to)
        .filter_map(|t| snapshot(episode, object, t))
        .collect();
    let (Some(first), Some(last)) = (alive.first(), alive.last()) else {
        return Err(ExplainError::AgentDead {
            agent: object.clone(),
            step: from,
        });
    };
    let class = first.class_name;
    let phrases = lexicon
        .classes
        .get(class.as_str())
        .ok_or_else(|| ExplainError::LexiconMiss(format!("class `{}`", class.as_str())))?;
    let noun = lexicon
        .noun(class, object)
        .expect("class entry checked above");

    let mut best: Option<(&str, f64, f64)> = None;
    for (name, before) in &first.attributes {
        let delta = last.get(name).unwrap_or(*before) - before;
        let scale = phrases.scales.get(name).ok_or_else(|| {
            ExplainError::LexiconMiss(format!("scale `{}.{name}`", class.as_str()))
        })?;
        let size = delta.abs() / scale;
        if best.is_none_or(|(_, s, _)| size > s) {
            best = Some((name, size, delta));
        }
    }
    let phrase = match best {
        Some((name, size, delta)) if size > 0.0 => {
            let key = format!("{name},{}", if delta > 0.0 { '+' } else { '-' });
            lexicon
                .behaviors
                .get(&key)
                .ok_or_else(|| ExplainError::LexiconMiss(format!("behavior `{key}`")))?
                .clone()
        }
        _ => phrases.stationary.clone(),
    };
    Ok(format!("{noun} is {phrase}"))
}

/// Behaviour of a path's source object between the path's first and last
/// steps, e.g. "a pedestrian is moving rightward".
pub fn describe_behavior(
    path: &[Node],
    episode: &Episode,
    lexicon: &Lexicon,
) -> Result<String, ExplainError> {
    let (first, last) = match (path.first(), path.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(ExplainError::EmptyPath),
    };
    describe_object(episode, lexicon, &first.object_id, first.step, last.step)
}

/// What happened to `object` after `agent` decided at `decision_step`,
/// judged over frames `decision_step..=effect_step + 1`.
pub fn outcome_pattern(
    episode: &Episode,
    agent: &ObjectId,
    object: &ObjectId,
    decision_step: u32,
    effect_step: u32,
) -> &'static str {
    let last = (effect_step + 1).min(episode.frames.len() as u32 - 1);
    let start = snapshot(episode, object, decision_step);
    let has_health = start.is_some_and(|s| s.get(attr::HEALTH).is_some());
    if has_health && snapshot(episode, object, last).is_none() {
        return "defeated";
    }
    let final_health = (decision_step..=last)
        .filter_map(|t| snapshot(episode, object, t))
        .next_back()
        .and_then(|s| s.get(attr::HEALTH));
    if let (Some(before), Some(after)) = (start.and_then(|s| s.get(attr::HEALTH)), final_health) {
        if after < before {
            return "damaged";
        }
    }
    let collided = (decision_step + 1..=last).any(|t| {
        match (snapshot(episode, agent, t), snapshot(episode, object, t)) {
            (Some(a), Some(o)) => a.position() == o.position(),
            _ => false,
        }
    });
    if collided {
        "collision"
    } else {
        "no-collision"
    }
}

/// Renders the explanation of `agent`'s decision at `step`.
pub fn render_explanation(
    graph: &InfluenceGraph,
    episode: &Episode,
    lexicon: &Lexicon,
    agent: &ObjectId,
    step: u32,
    horizon: u32,
) -> Result<Explanation, ExplainError> {
    let steps = episode.len() as u32;
    if step >= steps {
        return Err(ExplainError::StepOutOfRange { step, steps });
    }
    let decision = decision_node(agent, step);
    let action = episode.actions[step as usize].get(agent);
    let (Some(action), true) = (action, graph.contains(&decision)) else {
        return Err(ExplainError::AgentDead {
            agent: agent.clone(),
            step,
        });
    };
    let verb = lexicon
        .verb(action)
        .ok_or_else(|| ExplainError::LexiconMiss(format!("action `{action}`")))?
        .to_owned();
    let mut cause = None;
    let mut cause_path = Vec::new();
    if let Some(top) = top_cause(graph, &decision)? {
        cause_path = max_weight_path(&graph.cause_view(&decision), &top.node, &decision)?.nodes;
        let descriptor = describe_behavior(&cause_path, episode, lexicon)?;
        cause = Some(mention(
            episode,
            lexicon,
            top.node,
            descriptor,
            top.flow.value,
        )?);
    }

    let mut effect = None;
    let mut effect_path = Vec::new();
    if let Some(top) = top_effect(graph, &decision, horizon)? {
        effect_path = max_weight_path(&graph.agent_view(agent), &decision, &top.node)?.nodes;
        let object = &top.node.object_id;
        let descriptor = describe_object(episode, lexicon, object, decision.step, top.node.step)?;
        let class = snapshot(episode, object, top.node.step)
            .expect("graph nodes exist in their frame")
            .class_name;
        let pattern = outcome_pattern(episode, agent, object, step, top.node.step);
        let purpose = lexicon
            .purpose(action, class, pattern, object)
            .ok_or_else(|| {
                ExplainError::LexiconMiss(format!(
                    "purpose ({action}, {}, {pattern})",
                    class.as_str()
                ))
            })?;
        effect = Some(Effect {
            mention: mention(episode, lexicon, top.node, descriptor, top.flow.value)?,
            pattern: pattern.to_owned(),
            purpose,
        });
    }

    let purpose = effect
        .as_ref()
        .map(|e| format!(" to {}", e.purpose))
        .unwrap_or_default();
    let rendered = match &cause {
        Some(c) => format!("I observed {}, so I {verb}{purpose}.", c.descriptor),
        None => format!("I {verb}{purpose}; {NO_CAUSE}."),
    };
    Ok(Explanation {
        agent_id: agent.clone(),
        step,
        cause,
        decision: Decision {
            action: action.clone(),
            verb,
        },
        effect,
        cause_path,
        effect_path,
        rendered,
    })
}

fn mention(
    episode: &Episode,
    lexicon: &Lexicon,
    object: Node,
    descriptor: String,
    flow: f64,
) -> Result<Mention, ExplainError> {
    let class = snapshot(episode, &object.object_id, object.step)
        .expect("graph nodes exist in their frame")
        .class_name;
    let noun = lexicon
        .noun(class, &object.object_id)
        .ok_or_else(|| ExplainError::LexiconMiss(format!("class `{}`", class.as_str())))?;
    Ok(Mention {
        object,
        noun,
        descriptor,
        flow,
    })
}

/// Importance of each decision step: total influence weight entering the
/// agent's decision node. Steps where the agent is absent score 0.
pub fn importance_profile(graph: &InfluenceGraph, episode: &Episode, agent: &ObjectId) -> Vec<f64> {
    (0..episode.len() as u32)
        .map(|t| graph.importance(&decision_node(agent, t)))
        .collect()
}

/// The `ceil(top_fraction * T)` most important decision steps, in
/// chronological order; ties favour earlier steps.
pub fn important_steps(
    graph: &InfluenceGraph,
    episode: &Episode,
    agent: &ObjectId,
    top_fraction: f64,
) -> Result<Vec<u32>, ExplainError> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(ExplainError::InvalidFraction(top_fraction));
    }
    let scores = importance_profile(graph, episode, agent);
    let keep = (top_fraction * scores.len() as f64).ceil() as usize;
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout, Controllers, WorldState};
    use crate::graph::{build_graph, DEFAULT_XI};
    use crate::model::{ObjectClass, ObjectSnapshot};

    fn static_episode(frames: Vec<WorldState>) -> Episode {
        let actions = vec![Default::default(); frames.len() - 1];
        Episode {
            env_name: "skirmish".into(),
            seed: 0,
            frames,
            actions,
            policies: Default::default(),
            max_steps: 0,
        }
    }

    fn frame(step: u32, entities: Vec<ObjectSnapshot>) -> WorldState {
        WorldState {
            step,
            rng_seed: 0,
            entities,
            terminal: false,
            score: Default::default(),
        }
    }

    fn enemy(health: f64, (x, y): (f64, f64)) -> ObjectSnapshot {
        ObjectSnapshot::new(
            "enemy2",
            ObjectClass::EnemyUnit,
            true,
            [
                (attr::HEALTH, health),
                (attr::POSITION_X, x),
                (attr::POSITION_Y, y),
            ],
        )
    }

    #[test]
    fn largest_normalised_delta_wins() {
        let lex = Lexicon::builtin("skirmish").unwrap();
        let ep = static_episode(vec![
            frame(0, vec![enemy(100.0, (3.0, 3.0))]),
            frame(1, vec![enemy(80.0, (3.0, 4.0))]),
            frame(2, vec![enemy(60.0, (3.0, 4.0))]),
        ]);
        let path = [Node::new("enemy2", 0), Node::new("x", 1), Node::new("y", 2)];
        assert_eq!(
            describe_behavior(&path, &ep, &lex).unwrap(),
            "Enemy 2 is taking heavy damage"
        );
        // 20 health over a scale of 20 ties one cell of movement; names break it
        let short = [Node::new("enemy2", 0), Node::new("y", 1)];
        assert_eq!(
            describe_behavior(&short, &ep, &lex).unwrap(),
            "Enemy 2 is taking heavy damage"
        );
        let still = [Node::new("enemy2", 1), Node::new("y", 1)];
        assert_eq!(
            describe_behavior(&still, &ep, &lex).unwrap(),
            "Enemy 2 is holding position"
        );
        assert_eq!(
            describe_behavior(&[], &ep, &lex),
            Err(ExplainError::EmptyPath)
        );
    }

    #[test]
    fn missing_behavior_is_a_lexicon_miss() {
        let mut lex = Lexicon::builtin("skirmish").unwrap();
        lex.behaviors.remove("health,-");
        let ep = static_episode(vec![
            frame(0, vec![enemy(100.0, (3.0, 3.0))]),
            frame(1, vec![enemy(60.0, (3.0, 3.0))]),
        ]);
        let path = [Node::new("enemy2", 0), Node::new("ally1", 1)];
        assert!(matches!(
            describe_behavior(&path, &ep, &lex),
            Err(ExplainError::LexiconMiss(_))
        ));
    }

    fn blind_episode() -> (Episode, InfluenceGraph) {
        let specs = [(ObjectId::from("ego"), "blind".to_string())].into();
        let ep = rollout("traffic", 8, &specs, 12).unwrap();
        let g = build_graph(&ep, &Controllers::for_episode(&ep).unwrap(), DEFAULT_XI).unwrap();
        (ep, g)
    }

    #[test]
    fn blind_policy_falls_back() {
        let (ep, g) = blind_episode();
        let lex = Lexicon::builtin("traffic").unwrap();
        let ego = ObjectId::from("ego");
        for t in 0..ep.len() as u32 {
            let e = render_explanation(&g, &ep, &lex, &ego, t, DEFAULT_HORIZON).unwrap();
            assert!(e.cause.is_none());
            assert!(e.rendered.starts_with("I keep driving"));
            assert!(e
                .rendered
                .ends_with("; no observed object changed this decision."));
        }
        assert_eq!(important_steps(&g, &ep, &ego, 0.25).unwrap(), [0, 1, 2]);
        let all = important_steps(&g, &ep, &ego, 1.0).unwrap();
        assert_eq!(all, (0..ep.len() as u32).collect::<Vec<_>>());
        assert!(important_steps(&g, &ep, &ego, 0.0).is_err());
    }

    #[test]
    fn out_of_range_and_dead_agents() {
        let (ep, g) = blind_episode();
        let lex = Lexicon::builtin("traffic").unwrap();
        assert!(matches!(
            render_explanation(&g, &ep, &lex, &"ego".into(), ep.len() as u32, 3),
            Err(ExplainError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            render_explanation(&g, &ep, &lex, &"car9".into(), 0, 3),
            Err(ExplainError::AgentDead { .. })
        ));
    }

    #[test]
    fn focus_fire_names_its_target() {
        let ep = rollout("skirmish", 2, &Default::default(), 60).unwrap();
        let g = build_graph(&ep, &Controllers::for_episode(&ep).unwrap(), DEFAULT_XI).unwrap();
        let lex = Lexicon::builtin("skirmish").unwrap();
        let mut checked = 0;
        for (t, joint) in ep.actions.iter().enumerate() {
            let Some(target) = joint
                .get(&ObjectId::from("ally1"))
                .and_then(|a| a.strip_prefix("attack_"))
            else {
                continue;
            };
            let Ok(e) = render_explanation(&g, &ep, &lex, &"ally1".into(), t as u32, 3) else {
                continue;
            };
            let cause = e.cause.expect("attacks have a cause");
            assert_eq!(cause.object.object_id.as_str(), target);
            assert_eq!(e.decision.verb, "attack");
            assert!(e.rendered.starts_with("I observed Enemy "));
            checked += 1;
        }
        assert!(checked > 0);
    }
}

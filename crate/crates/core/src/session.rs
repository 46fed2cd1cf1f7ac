//! Recording episodes to disk and re-simulating them under what-if edits.
//!
//! An episode file is JSON Lines: a header object carrying the environment,
//! seed, step cap, policy specs and every joint action, followed by one
//! [`WorldState`] per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{
    roll_forward, rollout, Controllers, EnvError, Episode, JointAction, ObservationLog, WorldState,
};
use crate::model::{ActionDistribution, ObjectClass, ObjectId};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed episode file: {0}")]
    Parse(String),
    #[error("episode does not replay: {0}")]
    NonReplayable(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("step {step} is outside the episode (last frame {last})")]
    StepOutOfRange { step: u32, last: u32 },
    #[error(transparent)]
    Env(EnvError),
}

impl From<EnvError> for SessionError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::NonReplayable(msg) => SessionError::NonReplayable(msg),
            other => SessionError::Env(other),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    env_name: String,
    seed: u64,
    max_steps: usize,
    policies: BTreeMap<ObjectId, String>,
    actions: Vec<JointAction>,
}

/// Serialises an episode as JSON Lines. The output depends only on the
/// episode, so identical episodes give identical bytes.
pub fn episode_to_jsonl(episode: &Episode) -> String {
    let header = Header {
        env_name: episode.env_name.clone(),
        seed: episode.seed,
        max_steps: episode.max_steps,
        policies: episode.policies.clone(),
        actions: episode.actions.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for frame in &episode.frames {
        out.push_str(&serde_json::to_string(frame).expect("frame serialises"));
        out.push('\n');
    }
    out
}

/// Parses a JSON Lines episode and checks it replays exactly.
pub fn episode_from_jsonl(text: &str) -> Result<Episode, SessionError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| SessionError::Parse("empty file".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| SessionError::Parse(format!("line 1: {e}")))?;
    let frames = lines
        .map(|(i, line)| {
            serde_json::from_str::<WorldState>(line)
                .map_err(|e| SessionError::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if frames.is_empty() {
        return Err(SessionError::Parse("no frames".into()));
    }
    let episode = Episode {
        env_name: header.env_name,
        seed: header.seed,
        frames,
        actions: header.actions,
        policies: header.policies,
        max_steps: header.max_steps,
    };
    episode.env()?;
    episode.verify_replay()?;
    Controllers::for_episode(&episode)?;
    Ok(episode)
}

/// Rolls out an episode and writes it to `path`.
pub fn record_episode(
    env_name: &str,
    seed: u64,
    policies: &BTreeMap<ObjectId, String>,
    max_steps: usize,
    path: &Path,
) -> Result<Episode, SessionError> {
    let episode = rollout(env_name, seed, policies, max_steps)?;
    save_episode(&episode, path)?;
    Ok(episode)
}

pub fn save_episode(episode: &Episode, path: &Path) -> Result<(), SessionError> {
    let mut file = fs::File::create(path)?;
    file.write_all(episode_to_jsonl(episode).as_bytes())?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode, SessionError> {
    episode_from_jsonl(&fs::read_to_string(path)?)
}

/// A change to the world at one step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WhatIfEdit {
    SetAttribute {
        step: u32,
        object_id: ObjectId,
        attribute: String,
        value: f64,
    },
    /// The object is gone from this step on.
    Remove { step: u32, object_id: ObjectId },
}

impl WhatIfEdit {
    pub fn step(&self) -> u32 {
        match self {
            WhatIfEdit::SetAttribute { step, .. } | WhatIfEdit::Remove { step, .. } => *step,
        }
    }

    pub fn object_id(&self) -> &ObjectId {
        match self {
            WhatIfEdit::SetAttribute { object_id, .. } | WhatIfEdit::Remove { object_id, .. } => {
                object_id
            }
        }
    }

    fn apply(&self, state: &mut WorldState, grid: (i64, i64)) -> Result<(), SessionError> {
        let id = self.object_id();
        let step = state.step;
        let missing = || SessionError::InvalidEdit(format!("`{id}` is not present at step {step}"));
        match self {
            WhatIfEdit::Remove { .. } => {
                state.remove(id).ok_or_else(missing)?;
            }
            WhatIfEdit::SetAttribute {
                attribute, value, ..
            } => {
                let entity = state.entity_mut(id).ok_or_else(missing)?;
                check_value(entity.class_name, attribute, *value, grid)?;
                entity.attributes.insert(attribute.clone(), *value);
            }
        }
        Ok(())
    }
}

fn check_value(
    class: ObjectClass,
    attribute: &str,
    value: f64,
    grid: (i64, i64),
) -> Result<(), SessionError> {
    let Some((lo, hi)) = class.attribute_range(attribute, grid) else {
        return Err(SessionError::InvalidEdit(format!(
            "{class} has no attribute `{attribute}`"
        )));
    };
    if !value.is_finite() || !(lo..=hi).contains(&value) {
        return Err(SessionError::InvalidEdit(format!(
            "{attribute} = {value} outside [{lo}, {hi}]"
        )));
    }
    if ObjectClass::is_integral(attribute) && value.fract() != 0.0 {
        return Err(SessionError::InvalidEdit(format!(
            "{attribute} takes whole numbers, got {value}"
        )));
    }
    Ok(())
}

/// An episode re-simulated under a set of edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRollout {
    pub edits: Vec<WhatIfEdit>,
    /// Frames before this step are shared with the base episode.
    pub start_step: u32,
    /// Full counterfactual episode, including the shared prefix.
    pub episode: Episode,
    /// First step whose joint action differs from the base episode, or
    /// where one of the two episodes ends first. `None` when the actions
    /// match throughout.
    pub divergence_step: Option<u32>,
}

/// Re-simulates `base` from the earliest edit step with every edit applied
/// at its step. With no edits the whole episode is re-simulated from its
/// first frame.
pub fn what_if(
    base: &Episode,
    edits: &[WhatIfEdit],
) -> Result<CounterfactualRollout, SessionError> {
    let env = base.env()?;
    let controllers = Controllers::for_episode(base)?;
    let last = base.frames.len() as u32 - 1;
    for edit in edits {
        if edit.step() > last {
            return Err(SessionError::StepOutOfRange {
                step: edit.step(),
                last,
            });
        }
    }
    let start = edits.iter().map(WhatIfEdit::step).min().unwrap_or(0);
    let mut frames = base.frames[..=start as usize].to_vec();
    let mut actions = base.actions[..start as usize].to_vec();
    for edit in edits.iter().filter(|e| e.step() == start) {
        edit.apply(
            frames.last_mut().expect("prefix holds the start frame"),
            env.grid(),
        )?;
    }

    let mut failure = None;
    let max_steps = base.max_steps.max(base.len());
    let outcome = roll_forward(
        &controllers,
        &mut frames,
        &mut actions,
        max_steps,
        |state| {
            let step = state.step;
            for edit in edits.iter().filter(|e| e.step() == step) {
                if let Err(e) = edit.apply(state, env.grid()) {
                    failure = Some(e);
                    return Err(EnvError::DeadEntity(edit.object_id().clone()));
                }
            }
            Ok(())
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    outcome?;
    let reached = frames.len() as u32 - 1;
    if let Some(late) = edits.iter().find(|e| e.step() > reached) {
        return Err(SessionError::InvalidEdit(format!(
            "the counterfactual episode ends at step {reached}, before the edit at step {}",
            late.step()
        )));
    }

    let divergence_step = (0..base.actions.len().max(actions.len()))
        .find(|&t| base.actions.get(t) != actions.get(t))
        .map(|t| t as u32);
    Ok(CounterfactualRollout {
        edits: edits.to_vec(),
        start_step: start,
        episode: Episode {
            env_name: base.env_name.clone(),
            seed: base.seed,
            frames,
            actions,
            policies: base.policies.clone(),
            max_steps: base.max_steps,
        },
        divergence_step,
    })
}

/// The action distribution `agent`'s policy produces at `step` of `episode`.
pub fn decision_distribution(
    episode: &Episode,
    agent: &ObjectId,
    step: u32,
) -> Result<ActionDistribution, SessionError> {
    let env = episode.env()?;
    let last = episode.frames.len() as u32 - 1;
    if step > last {
        return Err(SessionError::StepOutOfRange { step, last });
    }
    let controllers = Controllers::for_episode(episode)?;
    let policy = controllers
        .agent(agent)
        .ok_or_else(|| SessionError::InvalidEdit(format!("`{agent}` is not an agent")))?;
    let log = ObservationLog::from_frames(env, &episode.frames[..=step as usize]);
    let history = log
        .history(agent, step)
        .ok_or(SessionError::Env(EnvError::DeadViewer(agent.clone())))?;
    Ok(policy.act(&history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::js_divergence;
    use crate::model::attr;

    fn traffic(seed: u64) -> Episode {
        rollout("traffic", seed, &Default::default(), 40).unwrap()
    }

    #[test]
    fn jsonl_round_trip_is_byte_stable() {
        let ep = rollout("skirmish", 3, &Default::default(), 30).unwrap();
        let text = episode_to_jsonl(&ep);
        assert_eq!(text.lines().count(), ep.frames.len() + 1);
        let back = episode_from_jsonl(&text).unwrap();
        assert_eq!(back, ep);
        assert_eq!(episode_to_jsonl(&back), text);
    }

    #[test]
    fn record_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.jsonl");
        let ep = record_episode("traffic", 9, &Default::default(), 25, &path).unwrap();
        let first = fs::read(&path).unwrap();
        record_episode("traffic", 9, &Default::default(), 25, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(load_episode(&path).unwrap(), ep);
    }

    #[test]
    fn tampered_files_are_rejected() {
        let ep = traffic(4);
        let text = episode_to_jsonl(&ep);
        let edited = text.replacen("\"speed\":", "\"speed\":2.0,\"x\":", 1);
        assert!(episode_from_jsonl(&edited).is_err());
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(2, 3);
        assert!(matches!(
            episode_from_jsonl(&lines.join("\n")),
            Err(SessionError::NonReplayable(_))
        ));
        assert!(matches!(
            episode_from_jsonl(""),
            Err(SessionError::Parse(_))
        ));
        assert!(matches!(
            episode_from_jsonl("{\"env_name\":\"traffic\"}"),
            Err(SessionError::Parse(_))
        ));
    }

    #[test]
    fn null_edits_reproduce_the_episode() {
        for seed in 0..5 {
            let ep = traffic(seed);
            let r = what_if(&ep, &[]).unwrap();
            assert_eq!(r.episode, ep);
            assert_eq!(r.divergence_step, None);
            // rewriting a value to itself changes nothing either
            let ped = ep.frames[2].entity(&"ped1".into()).unwrap();
            let same = WhatIfEdit::SetAttribute {
                step: 2,
                object_id: "ped1".into(),
                attribute: attr::SPEED.into(),
                value: ped.attr(attr::SPEED),
            };
            let r = what_if(&ep, &[same]).unwrap();
            assert_eq!(r.episode, ep);
            assert_eq!(r.start_step, 2);
        }
    }

    #[test]
    fn edits_leave_the_prefix_alone() {
        let ep = traffic(16);
        let edit = WhatIfEdit::Remove {
            step: 2,
            object_id: "ped1".into(),
        };
        let r = what_if(&ep, &[edit]).unwrap();
        assert_eq!(r.episode.frames[..2], ep.frames[..2]);
        assert_eq!(r.episode.actions[..2], ep.actions[..2]);
        assert!(r.episode.frames[2..]
            .iter()
            .all(|f| !f.is_alive(&"ped1".into())));
        if let Some(d) = r.divergence_step {
            assert!(d >= 2);
        }
    }

    #[test]
    fn removing_the_observed_pedestrian_changes_the_decision() {
        let ep = traffic(16);
        let ego = ObjectId::from("ego");
        let before = decision_distribution(&ep, &ego, 2).unwrap();
        let r = what_if(
            &ep,
            &[WhatIfEdit::Remove {
                step: 2,
                object_id: "ped1".into(),
            }],
        )
        .unwrap();
        let after = decision_distribution(&r.episode, &ego, 2).unwrap();
        assert!(js_divergence(&before, &after).unwrap() > 0.0);
    }

    #[test]
    fn invalid_edits_are_rejected() {
        let ep = traffic(1);
        let last = ep.frames.len() as u32 - 1;
        let set = |attribute: &str, value: f64| WhatIfEdit::SetAttribute {
            step: 1,
            object_id: "ego".into(),
            attribute: attribute.into(),
            value,
        };
        for bad in [
            set("health", 10.0),
            set(attr::SPEED, 7.0),
            set(attr::POSITION_X, 1.5),
            set(attr::SPEED, f64::NAN),
            WhatIfEdit::Remove {
                step: 1,
                object_id: "ghost".into(),
            },
        ] {
            assert!(
                matches!(
                    what_if(&ep, std::slice::from_ref(&bad)),
                    Err(SessionError::InvalidEdit(_))
                ),
                "{bad:?}"
            );
        }
        assert!(matches!(
            what_if(
                &ep,
                &[WhatIfEdit::Remove {
                    step: last + 1,
                    object_id: "ped1".into()
                }]
            ),
            Err(SessionError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn later_edits_apply_during_the_rollout() {
        let ep = rollout("skirmish", 5, &Default::default(), 30).unwrap();
        let edits = [
            WhatIfEdit::SetAttribute {
                step: 1,
                object_id: "enemy1".into(),
                attribute: attr::HEALTH.into(),
                value: 5.0,
            },
            WhatIfEdit::Remove {
                step: 3,
                object_id: "enemy2".into(),
            },
        ];
        let r = what_if(&ep, &edits).unwrap();
        assert_eq!(r.start_step, 1);
        assert!(r.episode.frames[2].is_alive(&"enemy2".into()));
        assert!(!r.episode.frames[3].is_alive(&"enemy2".into()));
        assert!(
            r.episode.frames[1]
                .entity(&"enemy1".into())
                .unwrap()
                .attr(attr::HEALTH)
                == 5.0
        );
        let json = serde_json::to_string(&edits[1]).unwrap();
        assert_eq!(json, r#"{"kind":"remove","step":3,"object_id":"enemy2"}"#);
    }
}

//! 12x12 skirmish, three allies (agents) against three scripted enemies.
//!
//! Attacks resolve before movement and use pre-step positions; a unit at 0
//! health is removed. Moves resolve in id order and are blocked by occupied
//! cells and the map edge.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    in_bounds, labels, move_delta, step_towards, EnvError, Environment, JointAction, WorldState,
};
use crate::model::{
    attr, chebyshev, ActionDistribution, Dependencies, ObjectClass, ObjectId, ObjectSnapshot,
    Observation, ObservationHistory, Policy,
};

pub const GRID: (i64, i64) = (12, 12);
pub const ATTACK_RANGE: i64 = 3;
pub const DAMAGE: f64 = 2.0;
pub const MAX_HEALTH: f64 = 100.0;
pub const WIN_REWARD: f64 = 200.0;

const ALLIES: [&str; 3] = ["ally1", "ally2", "ally3"];
const ENEMIES: [&str; 3] = ["enemy1", "enemy2", "enemy3"];

pub struct Skirmish {
    agents: Vec<ObjectId>,
    actions: Vec<String>,
    enemy: Arc<dyn Policy>,
}

impl Skirmish {
    pub(super) fn new() -> Self {
        Skirmish {
            agents: ALLIES.iter().map(|a| ObjectId::from(*a)).collect(),
            actions: unit_actions(&ENEMIES),
            enemy: Arc::new(EnemyRule::new()),
        }
    }
}

pub(crate) fn unit_actions(targets: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = targets.iter().map(|t| format!("attack_{t}")).collect();
    v.extend(labels(&["move_E", "move_N", "move_S", "move_W", "stay"]));
    v.sort();
    v
}

fn unit(id: &str, class: ObjectClass, (x, y): (i64, i64)) -> ObjectSnapshot {
    ObjectSnapshot::new(
        id,
        class,
        true,
        [
            (attr::POSITION_X, x as f64),
            (attr::POSITION_Y, y as f64),
            (attr::HEALTH, MAX_HEALTH),
        ],
    )
}

impl Environment for Skirmish {
    fn name(&self) -> &'static str {
        "skirmish"
    }

    fn grid(&self) -> (i64, i64) {
        GRID
    }

    fn reset(&self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ally_x: i64 = rng.gen_range(2..=5);
        let enemy_x: i64 = rng.gen_range(2..=5);
        let ally_y: i64 = rng.gen_range(0..=2);
        let enemy_y: i64 = rng.gen_range(9..=11);
        let mut entities = Vec::new();
        for (i, id) in ALLIES.iter().enumerate() {
            entities.push(unit(
                id,
                ObjectClass::AllyUnit,
                (ally_x + 2 * i as i64, ally_y),
            ));
        }
        for (i, id) in ENEMIES.iter().enumerate() {
            entities.push(unit(
                id,
                ObjectClass::EnemyUnit,
                (enemy_x + 2 * i as i64, enemy_y),
            ));
        }
        WorldState {
            step: 0,
            rng_seed: seed,
            entities,
            terminal: false,
            score: ALLIES.iter().map(|a| (ObjectId::from(*a), 0.0)).collect(),
        }
    }

    fn step(&self, state: &WorldState, joint: &JointAction) -> Result<WorldState, EnvError> {
        if state.terminal {
            return Err(EnvError::TerminalState(state.step));
        }
        let mut chosen: BTreeMap<ObjectId, String> = BTreeMap::new();
        for id in &self.agents {
            if !state.is_alive(id) {
                continue;
            }
            let a = joint
                .get(id)
                .ok_or_else(|| EnvError::MissingAction(id.clone()))?;
            if !self.actions.contains(a) {
                return Err(EnvError::InvalidAction {
                    agent: id.clone(),
                    action: a.clone(),
                });
            }
            chosen.insert(id.clone(), a.clone());
        }
        for e in state
            .entities
            .iter()
            .filter(|e| e.class_name == ObjectClass::EnemyUnit)
        {
            let obs = super::oracle_segmentation(self, state, &e.object_id)?;
            let history = ObservationHistory {
                viewer_id: e.object_id.clone(),
                frames: vec![Arc::new(obs)],
            };
            chosen.insert(
                e.object_id.clone(),
                self.enemy.act(&history).mode().to_owned(),
            );
        }

        let mut next = state.clone();
        next.step += 1;

        // attacks, simultaneous, measured on pre-step positions
        let mut damage: BTreeMap<ObjectId, f64> = BTreeMap::new();
        for (attacker, action) in &chosen {
            let Some(target) = action.strip_prefix("attack_") else {
                continue;
            };
            let target = ObjectId::from(target);
            let (Some(a), Some(t)) = (state.entity(attacker), state.entity(&target)) else {
                continue;
            };
            if a.class_name != t.class_name && chebyshev(a.position(), t.position()) <= ATTACK_RANGE
            {
                *damage.entry(target).or_default() += DAMAGE;
            }
        }
        for (target, amount) in damage {
            let snap = next.entity_mut(&target).expect("target alive");
            let health = (snap.attr(attr::HEALTH) - amount).max(0.0);
            snap.attributes.insert(attr::HEALTH.into(), health);
            if health <= 0.0 {
                next.remove(&target);
            }
        }

        // moves, in id order, against the evolving occupancy
        for (mover, action) in &chosen {
            let Some((dx, dy)) = move_delta(action) else {
                continue;
            };
            let Some(snap) = next.entity(mover) else {
                continue;
            };
            let (x, y) = snap.position();
            let target = (x + dx, y + dy);
            let occupied = next.entities.iter().any(|e| e.position() == target);
            if in_bounds(target, GRID) && !occupied {
                next.entity_mut(mover).expect("alive").set_position(target);
            }
        }

        let enemies_left = next
            .entities
            .iter()
            .any(|e| e.class_name == ObjectClass::EnemyUnit);
        let allies_left = next
            .entities
            .iter()
            .any(|e| e.class_name == ObjectClass::AllyUnit);
        if !enemies_left {
            next.terminal = true;
            for e in next
                .entities
                .iter()
                .filter(|e| e.class_name == ObjectClass::AllyUnit)
            {
                *next.score.entry(e.object_id.clone()).or_default() += WIN_REWARD;
            }
        } else if !allies_left {
            next.terminal = true;
        }
        Ok(next)
    }

    fn visibility_radius(&self) -> Option<i64> {
        None
    }

    fn agent_ids(&self) -> &[ObjectId] {
        &self.agents
    }

    fn agent_action_set(&self) -> &[String] {
        &self.actions
    }

    fn npc_policy(&self, class: ObjectClass) -> Option<Arc<dyn Policy>> {
        match class {
            ObjectClass::EnemyUnit => Some(self.enemy.clone()),
            _ => None,
        }
    }

    fn classes(&self) -> &[ObjectClass] {
        &[ObjectClass::AllyUnit, ObjectClass::EnemyUnit]
    }

    fn default_policy(&self) -> &'static str {
        "focus_fire"
    }
}

/// Nearest unit of `class`; ties go to the lowest id.
pub(crate) fn nearest(
    obs: &Observation,
    from: (i64, i64),
    class: ObjectClass,
) -> Option<&ObjectSnapshot> {
    obs.of_class(class).min_by(|a, b| {
        chebyshev(from, a.position())
            .cmp(&chebyshev(from, b.position()))
            .then_with(|| a.object_id.cmp(&b.object_id))
    })
}

/// Built-in enemy: attack the nearest ally in range, otherwise close in on
/// the nearest ally. Ties go to the lowest id.
pub struct EnemyRule {
    actions: Vec<String>,
    deps: Dependencies,
}

impl EnemyRule {
    fn new() -> Self {
        EnemyRule {
            actions: unit_actions(&ALLIES),
            deps: [
                (ObjectClass::AllyUnit, attr::POSITION_X.to_owned()),
                (ObjectClass::AllyUnit, attr::POSITION_Y.to_owned()),
            ]
            .into(),
        }
    }
}

impl Policy for EnemyRule {
    fn id(&self) -> &str {
        "npc_enemy"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let obs = history.latest().expect("non-empty history");
        let here = obs.viewer().expect("viewer sees itself").position();
        let action = match nearest(obs, here, ObjectClass::AllyUnit) {
            Some(ally) if chebyshev(here, ally.position()) <= ATTACK_RANGE => {
                format!("attack_{}", ally.object_id)
            }
            Some(ally) => step_towards(here, ally.position())
                .unwrap_or("stay")
                .to_owned(),
            None => "stay".to_owned(),
        };
        ActionDistribution::delta(&self.actions, &action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{env_by_name, ObservationLog};

    fn stay_all() -> JointAction {
        ALLIES
            .iter()
            .map(|a| (ObjectId::from(*a), "stay".to_string()))
            .collect()
    }

    fn place(state: &mut WorldState, id: &str, cell: (i64, i64)) {
        state.entity_mut(&id.into()).unwrap().set_position(cell);
    }

    #[test]
    fn out_of_range_attack_is_a_no_op() {
        let env = env_by_name("skirmish").unwrap();
        let mut s = env.reset(0);
        place(&mut s, "ally1", (0, 0));
        place(&mut s, "enemy1", (5, 0));
        place(&mut s, "ally2", (0, 11));
        place(&mut s, "ally3", (1, 11));
        place(&mut s, "enemy2", (11, 11));
        place(&mut s, "enemy3", (11, 10));
        let mut joint = stay_all();
        joint.insert("ally1".into(), "attack_enemy1".into());
        let next = env.step(&s, &joint).unwrap();
        assert_eq!(
            next.entity(&"enemy1".into()).unwrap().attr(attr::HEALTH),
            MAX_HEALTH
        );
        assert_eq!(next.entity(&"ally1".into()).unwrap().position(), (0, 0));
    }

    #[test]
    fn in_range_attack_deals_fixed_damage() {
        let env = env_by_name("skirmish").unwrap();
        let mut s = env.reset(0);
        place(&mut s, "ally1", (0, 0));
        place(&mut s, "enemy1", (3, 3));
        let mut joint = stay_all();
        joint.insert("ally1".into(), "attack_enemy1".into());
        let next = env.step(&s, &joint).unwrap();
        assert_eq!(
            next.entity(&"enemy1".into()).unwrap().attr(attr::HEALTH),
            MAX_HEALTH - DAMAGE
        );
    }

    #[test]
    fn dead_units_are_removed_and_win_pays_out() {
        let env = env_by_name("skirmish").unwrap();
        let mut s = env.reset(0);
        for e in ENEMIES {
            s.entity_mut(&e.into())
                .unwrap()
                .attributes
                .insert(attr::HEALTH.into(), DAMAGE);
        }
        place(&mut s, "ally1", (0, 0));
        place(&mut s, "ally2", (5, 0));
        place(&mut s, "ally3", (10, 0));
        place(&mut s, "enemy1", (0, 2));
        place(&mut s, "enemy2", (5, 2));
        place(&mut s, "enemy3", (10, 2));
        let joint: JointAction = [
            ("ally1".into(), "attack_enemy1".to_string()),
            ("ally2".into(), "attack_enemy2".to_string()),
            ("ally3".into(), "attack_enemy3".to_string()),
        ]
        .into();
        let next = env.step(&s, &joint).unwrap();
        assert!(next.terminal);
        assert_eq!(next.entities.len(), 3);
        assert_eq!(next.score[&ObjectId::from("ally2")], WIN_REWARD);
    }

    #[test]
    fn enemy_tie_break_prefers_lower_id() {
        let env = env_by_name("skirmish").unwrap();
        let mut s = env.reset(0);
        place(&mut s, "enemy1", (5, 5));
        place(&mut s, "ally1", (3, 5));
        place(&mut s, "ally2", (7, 5));
        place(&mut s, "ally3", (5, 11));
        let log = ObservationLog::from_frames(env, std::slice::from_ref(&s));
        let h = log.history(&"enemy1".into(), 0).unwrap();
        let d = env.npc_policy(ObjectClass::EnemyUnit).unwrap().act(&h);
        assert_eq!(d.probability("attack_ally1"), 1.0);
    }

    #[test]
    fn total_health_never_increases() {
        let env = env_by_name("skirmish").unwrap();
        let health = |s: &WorldState| s.entities.iter().map(|e| e.attr(attr::HEALTH)).sum::<f64>();
        for seed in 0..5 {
            let mut s = env.reset(seed);
            for _ in 0..40 {
                let next = env.step(&s, &stay_all()).unwrap();
                assert!(health(&next) <= health(&s));
                if next.terminal {
                    break;
                }
                s = next;
            }
        }
    }
}

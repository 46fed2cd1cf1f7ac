//! 15x15 crossing: the ego car drives north in lane x = 7 towards row 14,
//! two scripted cars drive south in lane x = 6, one pedestrian crosses
//! eastwards low on the map and one westwards high on the map, and a timed
//! light at row 8 governs the ego lane.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{in_bounds, labels, offset, EnvError, Environment, JointAction, WorldState};
use crate::model::{
    attr, chebyshev, ActionDistribution, Dependencies, ObjectClass, ObjectId, ObjectSnapshot,
    ObservationHistory, Policy,
};

pub const GRID: (i64, i64) = (15, 15);
pub const EGO_LANE: i64 = 7;
pub const ONCOMING_LANE: i64 = 6;
pub const LIGHT_CELL: (i64, i64) = (8, 8);
/// Row the ego may not enter unless the light is green.
pub const STOP_ROW: i64 = 8;
pub const DESTINATION_ROW: i64 = 14;
pub const VISIBILITY: i64 = 6;
/// Drivers watch this many rows ahead, this many columns either side.
pub const WATCH_ROWS: i64 = 2;
pub const WATCH_HALF_WIDTH: i64 = 2;
/// Pedestrians hurry when a vehicle is this close.
pub const ALERT_RADIUS: i64 = 2;

const LIGHT_CYCLE: u32 = 12;
const GREEN_PHASE: u32 = 6;
const YELLOW_PHASE: u32 = 2;

pub const COLLISION_REWARD: f64 = -100.0;
pub const ARRIVAL_REWARD: f64 = 100.0;
pub const STEP_REWARD: f64 = -1.0;

pub struct Traffic {
    agents: Vec<ObjectId>,
    actions: Vec<String>,
    pedestrian: Arc<dyn Policy>,
    car: Arc<dyn Policy>,
}

impl Traffic {
    pub(super) fn new() -> Self {
        Traffic {
            agents: vec![ObjectId::from("ego")],
            actions: labels(&["brake", "go"]),
            pedestrian: Arc::new(PedestrianRule::new()),
            car: Arc::new(CarRule::new()),
        }
    }
}

fn light_offset(seed: u64) -> u32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng.gen_range(0..LIGHT_CYCLE)
}

/// Light colour at `step` for the world seeded with `seed`.
pub fn light_state(seed: u64, step: u32) -> f64 {
    let phase = (step + light_offset(seed)) % LIGHT_CYCLE;
    if phase < GREEN_PHASE {
        attr::LIGHT_GREEN
    } else if phase < GREEN_PHASE + YELLOW_PHASE {
        attr::LIGHT_YELLOW
    } else {
        attr::LIGHT_RED
    }
}

fn vehicle(id: &str, (x, y): (i64, i64), heading: f64) -> ObjectSnapshot {
    ObjectSnapshot::new(
        id,
        ObjectClass::Vehicle,
        true,
        [
            (attr::POSITION_X, x as f64),
            (attr::POSITION_Y, y as f64),
            (attr::SPEED, 0.0),
            (attr::HEADING, heading),
        ],
    )
}

fn pedestrian(id: &str, (x, y): (i64, i64), heading: f64) -> ObjectSnapshot {
    ObjectSnapshot::new(
        id,
        ObjectClass::Pedestrian,
        true,
        [
            (attr::POSITION_X, x as f64),
            (attr::POSITION_Y, y as f64),
            (attr::SPEED, 1.0),
            (attr::HEADING, heading),
        ],
    )
}

impl Environment for Traffic {
    fn name(&self) -> &'static str {
        "traffic"
    }

    fn grid(&self) -> (i64, i64) {
        GRID
    }

    fn reset(&self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ped1 = (rng.gen_range(0..=4), rng.gen_range(3..=5));
        let ped2 = (rng.gen_range(10..=14), rng.gen_range(10..=12));
        let car1 = (ONCOMING_LANE, rng.gen_range(12..=14));
        let car2 = (ONCOMING_LANE, rng.gen_range(3..=9));
        let mut entities = vec![
            vehicle("car1", car1, attr::HEADING_S),
            vehicle("car2", car2, attr::HEADING_S),
            vehicle("ego", (EGO_LANE, 0), attr::HEADING_N),
            ObjectSnapshot::new(
                "light1",
                ObjectClass::TrafficLight,
                false,
                [
                    (attr::POSITION_X, LIGHT_CELL.0 as f64),
                    (attr::POSITION_Y, LIGHT_CELL.1 as f64),
                    (attr::LIGHT_STATE, light_state(seed, 0)),
                ],
            ),
            pedestrian("ped1", ped1, attr::HEADING_E),
            pedestrian("ped2", ped2, attr::HEADING_W),
        ];
        entities.sort_by(|a, b| a.object_id.cmp(&b.object_id));
        WorldState {
            step: 0,
            rng_seed: seed,
            entities,
            terminal: false,
            score: BTreeMap::from([(ObjectId::from("ego"), 0.0)]),
        }
    }

    fn step(&self, state: &WorldState, joint: &JointAction) -> Result<WorldState, EnvError> {
        if state.terminal {
            return Err(EnvError::TerminalState(state.step));
        }
        let ego_id = &self.agents[0];
        let ego_action = match state.entity(ego_id) {
            Some(_) => {
                let a = joint
                    .get(ego_id)
                    .ok_or_else(|| EnvError::MissingAction(ego_id.clone()))?;
                if !self.actions.contains(a) {
                    return Err(EnvError::InvalidAction {
                        agent: ego_id.clone(),
                        action: a.clone(),
                    });
                }
                Some(a.as_str())
            }
            None => None,
        };

        let mut next = state.clone();
        next.step += 1;
        let mut pedestrian_cells_before = Vec::new();

        for e in &state.entities {
            if !e.dynamic || &e.object_id == ego_id {
                continue;
            }
            let policy = self
                .npc_policy(e.class_name)
                .expect("dynamic traffic entities have rules");
            let obs = super::oracle_segmentation(self, state, &e.object_id)?;
            let history = ObservationHistory {
                viewer_id: e.object_id.clone(),
                frames: vec![Arc::new(obs)],
            };
            let dist = policy.act(&history);
            let action = dist.mode();
            let cells = match action {
                "move_E" | "move_W" | "move_S" => 1,
                "run_E" | "run_W" => 2,
                _ => 0,
            };
            let (dx, dy) = offset(e.attr(attr::HEADING), cells);
            let (x, y) = e.position();
            let target = (x + dx, y + dy);
            if e.class_name == ObjectClass::Pedestrian {
                pedestrian_cells_before.push((x, y));
            }
            if !in_bounds(target, GRID) {
                next.remove(&e.object_id);
                continue;
            }
            let snap = next.entity_mut(&e.object_id).expect("cloned from state");
            snap.set_position(target);
            snap.attributes.insert(attr::SPEED.into(), cells as f64);
        }

        if let Some(action) = ego_action {
            let ego = next.entity_mut(ego_id).expect("ego alive");
            let (x, y) = ego.position();
            let moved = action == "go";
            let target = if moved { (x, y + 1) } else { (x, y) };
            ego.set_position(target);
            ego.attributes
                .insert(attr::SPEED.into(), if moved { 1.0 } else { 0.0 });

            let mut reward = STEP_REWARD;
            let collided = next.entities.iter().any(|e| {
                &e.object_id != ego_id
                    && matches!(e.class_name, ObjectClass::Vehicle | ObjectClass::Pedestrian)
                    && e.position() == target
            }) || (moved && pedestrian_cells_before.contains(&target));
            if collided {
                reward += COLLISION_REWARD;
                next.terminal = true;
            } else if target.1 >= DESTINATION_ROW {
                reward += ARRIVAL_REWARD;
                next.terminal = true;
            }
            *next.score.entry(ego_id.clone()).or_default() += reward;
        }

        let colour = light_state(state.rng_seed, next.step);
        if let Some(light) = next.entity_mut(&ObjectId::from("light1")) {
            light.attributes.insert(attr::LIGHT_STATE.into(), colour);
        }
        next.sort_entities();
        Ok(next)
    }

    fn visibility_radius(&self) -> Option<i64> {
        Some(VISIBILITY)
    }

    fn agent_ids(&self) -> &[ObjectId] {
        &self.agents
    }

    fn agent_action_set(&self) -> &[String] {
        &self.actions
    }

    fn npc_policy(&self, class: ObjectClass) -> Option<Arc<dyn Policy>> {
        match class {
            ObjectClass::Pedestrian => Some(self.pedestrian.clone()),
            ObjectClass::Vehicle => Some(self.car.clone()),
            _ => None,
        }
    }

    fn classes(&self) -> &[ObjectClass] {
        &[
            ObjectClass::Vehicle,
            ObjectClass::Pedestrian,
            ObjectClass::TrafficLight,
        ]
    }

    fn default_policy(&self) -> &'static str {
        "scripted_driver"
    }
}

/// Pedestrians walk along their heading and hurry (two cells) while any
/// vehicle is within [`ALERT_RADIUS`].
pub struct PedestrianRule {
    actions: Vec<String>,
    deps: Dependencies,
}

impl PedestrianRule {
    fn new() -> Self {
        PedestrianRule {
            actions: labels(&["move_E", "move_W", "run_E", "run_W"]),
            deps: [
                (ObjectClass::Vehicle, attr::POSITION_X.to_owned()),
                (ObjectClass::Vehicle, attr::POSITION_Y.to_owned()),
            ]
            .into(),
        }
    }
}

impl Policy for PedestrianRule {
    fn id(&self) -> &str {
        "npc_pedestrian"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let obs = history.latest().expect("non-empty history");
        let me = obs.viewer().expect("viewer sees itself");
        let here = me.position();
        let alarmed = obs
            .of_class(ObjectClass::Vehicle)
            .any(|v| chebyshev(v.position(), here) <= ALERT_RADIUS);
        let east = me.attr(attr::HEADING) == attr::HEADING_E;
        let action = match (alarmed, east) {
            (false, true) => "move_E",
            (false, false) => "move_W",
            (true, true) => "run_E",
            (true, false) => "run_W",
        };
        ActionDistribution::delta(&self.actions, action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

/// Oncoming cars hold for pedestrians just ahead and for a car stopped in
/// the next cell.
pub struct CarRule {
    actions: Vec<String>,
    deps: Dependencies,
}

impl CarRule {
    fn new() -> Self {
        CarRule {
            actions: labels(&["move_S", "stay"]),
            deps: [
                (ObjectClass::Pedestrian, attr::POSITION_X.to_owned()),
                (ObjectClass::Pedestrian, attr::POSITION_Y.to_owned()),
                (ObjectClass::Vehicle, attr::POSITION_X.to_owned()),
                (ObjectClass::Vehicle, attr::POSITION_Y.to_owned()),
            ]
            .into(),
        }
    }
}

impl Policy for CarRule {
    fn id(&self) -> &str {
        "npc_car"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let obs = history.latest().expect("non-empty history");
        let me = obs.viewer().expect("viewer sees itself");
        let (x, y) = me.position();
        let pedestrian_ahead = obs.of_class(ObjectClass::Pedestrian).any(|p| {
            let (px, py) = p.position();
            (1..=WATCH_ROWS).contains(&(y - py)) && (px - x).abs() <= WATCH_HALF_WIDTH
        });
        let blocked = obs
            .of_class(ObjectClass::Vehicle)
            .any(|v| v.object_id != me.object_id && v.position() == (x, y - 1));
        let action = if pedestrian_ahead || blocked {
            "stay"
        } else {
            "move_S"
        };
        ActionDistribution::delta(&self.actions, action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

//! Tabular Q-learning over a small discretised view of each agent's
//! surroundings. Gives a policy whose reasoning nobody wrote by hand.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::skirmish::{nearest, ATTACK_RANGE};
use super::traffic::STOP_ROW;
use super::{env_by_name, oracle_segmentation, EnvError, JointAction};
use crate::model::{
    attr, chebyshev, ActionDistribution, ObjectClass, Observation, ObservationHistory, Policy,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for QParams {
    fn default() -> Self {
        QParams {
            episodes: 5000,
            alpha: 0.1,
            gamma: 0.95,
            epsilon: 0.1,
            seed: 0,
            max_steps: 60,
        }
    }
}

/// Greedy policy over a learned Q table. Unseen keys act as all-zero rows,
/// so the first action in `actions` wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQPolicy {
    pub id: String,
    pub env_name: String,
    pub actions: Vec<String>,
    pub table: BTreeMap<String, Vec<f64>>,
}

impl TabularQPolicy {
    pub fn untrained(env_name: &str, id: String) -> Result<Self, EnvError> {
        let env = env_by_name(env_name)?;
        Ok(TabularQPolicy {
            id,
            env_name: env.name().to_owned(),
            actions: env.agent_action_set().to_vec(),
            table: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::PolicyFile(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| EnvError::PolicyFile(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let text = serde_json::to_string_pretty(self).expect("Q table serialises");
        std::fs::write(path, text)
            .map_err(|e| EnvError::PolicyFile(format!("{}: {e}", path.display())))
    }

    fn greedy(&self, key: &str) -> usize {
        let Some(row) = self.table.get(key) else {
            return 0;
        };
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }

    fn row_max(&self, key: &str) -> f64 {
        self.table
            .get(key)
            .map_or(0.0, |row| row.iter().cloned().fold(f64::MIN, f64::max))
    }
}

impl Policy for TabularQPolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let obs = history.latest().expect("non-empty history");
        let a = self.greedy(&state_key(&self.env_name, obs));
        ActionDistribution::delta(&self.actions, &self.actions[a])
    }
}

/// Discretised local features of the viewer's latest observation.
pub fn state_key(env_name: &str, obs: &Observation) -> String {
    let me = obs.viewer().expect("viewer sees itself");
    let (x, y) = me.position();
    match env_name {
        "traffic" => {
            let ped = obs
                .of_class(ObjectClass::Pedestrian)
                .map(|p| {
                    let (px, py) = p.position();
                    (py - y, px - x)
                })
                .filter(|(dy, dx)| (0..=3).contains(dy) && dx.abs() <= 3)
                .min_by_key(|(dy, dx)| (*dy, dx.abs(), *dx));
            let ped = match ped {
                Some((dy, dx)) => format!("p{dx},{dy}"),
                None => "p-".into(),
            };
            let light = obs
                .of_class(ObjectClass::TrafficLight)
                .next()
                .filter(|_| y + 1 == STOP_ROW)
                .map_or("l-".into(), |l| format!("l{}", l.attr(attr::LIGHT_STATE)));
            format!("{ped}|{light}")
        }
        _ => {
            let health = (me.attr(attr::HEALTH) / 34.0).floor() as i64;
            let near = nearest(obs, (x, y), ObjectClass::EnemyUnit).map_or("n-".into(), |e| {
                let (ex, ey) = e.position();
                format!("n{},{}", (ex - x).clamp(-4, 4), (ey - y).clamp(-4, 4))
            });
            let weakest = obs
                .of_class(ObjectClass::EnemyUnit)
                .filter(|e| chebyshev((x, y), e.position()) <= ATTACK_RANGE)
                .min_by(|a, b| {
                    a.attr(attr::HEALTH)
                        .total_cmp(&b.attr(attr::HEALTH))
                        .then_with(|| a.object_id.cmp(&b.object_id))
                })
                .map_or("w-".into(), |e| format!("w{}", e.object_id));
            format!("h{health}|{near}|{weakest}")
        }
    }
}

/// Epsilon-greedy tabular Q-learning; all agents of the environment share
/// one table. Deterministic for a fixed `params.seed`.
pub fn train_tabular_q(env_name: &str, params: &QParams) -> Result<TabularQPolicy, EnvError> {
    let env = env_by_name(env_name)?;
    for (name, v) in [
        ("alpha", params.alpha),
        ("gamma", params.gamma),
        ("epsilon", params.epsilon),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(EnvError::InvalidHyperparameter(format!(
                "{name} = {v} is outside (0, 1]"
            )));
        }
    }
    let id = format!("q-{}-s{}-e{}", env.name(), params.seed, params.episodes);
    let mut q = TabularQPolicy::untrained(env_name, id)?;
    let n_actions = q.actions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    for _ in 0..params.episodes {
        let mut state = env.reset(rng.gen_range(0..1_000_000));
        for _ in 0..params.max_steps {
            if state.terminal {
                break;
            }
            let mut joint = JointAction::new();
            let mut taken = Vec::new();
            for id in env.agent_ids().iter().filter(|id| state.is_alive(id)) {
                let obs = oracle_segmentation(env, &state, id)?;
                let key = state_key(env_name, &obs);
                let a = if rng.gen::<f64>() < params.epsilon {
                    rng.gen_range(0..n_actions)
                } else {
                    q.greedy(&key)
                };
                joint.insert(id.clone(), q.actions[a].clone());
                taken.push((id.clone(), key, a));
            }
            let next = env.step(&state, &joint)?;
            for (id, key, a) in taken {
                let reward = next.score.get(&id).copied().unwrap_or(0.0)
                    - state.score.get(&id).copied().unwrap_or(0.0);
                let future = if next.terminal || !next.is_alive(&id) {
                    0.0
                } else {
                    let obs = oracle_segmentation(env, &next, &id)?;
                    q.row_max(&state_key(env_name, &obs))
                };
                let row = q.table.entry(key).or_insert_with(|| vec![0.0; n_actions]);
                row[a] += params.alpha * (reward + params.gamma * future - row[a]);
            }
            state = next;
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{env_by_name, rollout, ObservationLog};
    use crate::model::ObjectId;

    #[test]
    fn zero_episodes_gives_first_action_everywhere() {
        let params = QParams {
            episodes: 0,
            ..QParams::default()
        };
        let q = train_tabular_q("traffic", &params).unwrap();
        assert!(q.table.is_empty());
        let env = env_by_name("traffic").unwrap();
        let s = env.reset(3);
        let log = ObservationLog::from_frames(env, std::slice::from_ref(&s));
        let h = log.history(&ObjectId::from("ego"), 0).unwrap();
        assert_eq!(q.act(&h), ActionDistribution::delta(&q.actions, "brake"));
    }

    #[test]
    fn training_is_deterministic() {
        let params = QParams {
            episodes: 200,
            ..QParams::default()
        };
        for env in ["traffic", "skirmish"] {
            let a = train_tabular_q(env, &params).unwrap();
            let b = train_tabular_q(env, &params).unwrap();
            assert_eq!(a, b);
            assert!(!a.table.is_empty());
        }
    }

    #[test]
    fn hyperparameters_are_validated() {
        for bad in [0.0, 1.5, f64::NAN] {
            let params = QParams {
                alpha: bad,
                ..QParams::default()
            };
            assert!(matches!(
                train_tabular_q("traffic", &params),
                Err(EnvError::InvalidHyperparameter(_))
            ));
        }
        assert!(matches!(
            train_tabular_q("atari", &QParams::default()),
            Err(EnvError::UnknownEnv(_))
        ));
    }

    #[test]
    fn saved_policy_round_trips_through_a_spec() {
        let params = QParams {
            episodes: 50,
            ..QParams::default()
        };
        let q = train_tabular_q("traffic", &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        q.save(&path).unwrap();
        assert_eq!(TabularQPolicy::load(&path).unwrap(), q);
        let spec = format!("q:{}", path.display());
        let policies = [(ObjectId::from("ego"), spec)].into();
        let ep = rollout("traffic", 1, &policies, 20).unwrap();
        ep.verify_replay().unwrap();
    }

    /// Fraction of evaluation seeds on which the ego reaches its destination.
    fn success_rate(spec: &str, seeds: std::ops::Range<u64>) -> f64 {
        let n = seeds.end - seeds.start;
        let wins = seeds
            .filter(|seed| {
                let policies = [(ObjectId::from("ego"), spec.to_owned())].into();
                let ep = rollout("traffic", *seed, &policies, 60).unwrap();
                let last = ep.frames.last().unwrap();
                last.terminal && last.score[&ObjectId::from("ego")] > 0.0
            })
            .count();
        wins as f64 / n as f64
    }

    #[test]
    fn trained_driver_beats_random() {
        let q = train_tabular_q("traffic", &QParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        q.save(&path).unwrap();
        let trained = success_rate(&format!("q:{}", path.display()), 10_000..10_100);
        let random = success_rate("random", 10_000..10_100);
        assert!(
            trained > random,
            "trained {trained} should beat random {random}"
        );
    }
}

//! Agent policies and the spec strings that name them.
//!
//! | spec                     | env      | behaviour                                 |
//! |--------------------------|----------|-------------------------------------------|
//! | `scripted_driver`        | traffic  | brake for pedestrians ahead and the light |
//! | `focus_fire`             | skirmish | attack the weakest enemy in range         |
//! | `blind`                  | both     | constant action, reads nothing            |
//! | `random`                 | both     | uniform over the action set               |
//! | `softmax:<temp>:<inner>` | both     | softmax over the inner policy's output    |
//! | `q:<path>`               | both     | tabular Q policy saved by `train`         |

use std::sync::Arc;

use super::skirmish::{nearest, ATTACK_RANGE};
use super::traffic::{STOP_ROW, WATCH_HALF_WIDTH, WATCH_ROWS};
use super::{env_by_name, step_towards, EnvError, TabularQPolicy};
use crate::model::{
    attr, chebyshev, ActionDistribution, Dependencies, ObjectClass, ObservationHistory, Policy,
};

pub fn resolve_policy(env_name: &str, spec: &str) -> Result<Arc<dyn Policy>, EnvError> {
    let env = env_by_name(env_name)?;
    let actions = env.agent_action_set().to_vec();
    if let Some(rest) = spec.strip_prefix("softmax:") {
        let (temp, inner) = rest
            .split_once(':')
            .ok_or_else(|| EnvError::UnknownPolicy(spec.to_owned()))?;
        let temperature: f64 = temp
            .parse()
            .map_err(|_| EnvError::UnknownPolicy(spec.to_owned()))?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(EnvError::UnknownPolicy(spec.to_owned()));
        }
        let inner = resolve_policy(env_name, inner)?;
        return Ok(Arc::new(SoftmaxPolicy::new(inner, temperature)));
    }
    if let Some(path) = spec.strip_prefix("q:") {
        let policy = TabularQPolicy::load(std::path::Path::new(path))?;
        if policy.env_name != env_name {
            return Err(EnvError::PolicyFile(format!(
                "{path} was trained on {}, not {env_name}",
                policy.env_name
            )));
        }
        return Ok(Arc::new(policy));
    }
    match (env_name, spec) {
        ("traffic", "scripted_driver") => Ok(Arc::new(ScriptedDriver::new())),
        ("skirmish", "focus_fire") => Ok(Arc::new(FocusFirePolicy::new())),
        ("traffic", "blind") => Ok(Arc::new(BlindPolicy::new(actions, "go"))),
        ("skirmish", "blind") => Ok(Arc::new(BlindPolicy::new(actions, "stay"))),
        (_, "random") => Ok(Arc::new(RandomPolicy::new(actions))),
        _ => Err(EnvError::UnknownPolicy(spec.to_owned())),
    }
}

/// Traffic driver with declared ground truth: it brakes when a pedestrian
/// is within the watch box ahead, or when it is about to enter the
/// intersection on a non-green light. It never reads other vehicles.
pub struct ScriptedDriver {
    actions: Vec<String>,
    deps: Dependencies,
}

impl ScriptedDriver {
    pub fn new() -> Self {
        ScriptedDriver {
            actions: super::labels(&["brake", "go"]),
            deps: [
                (ObjectClass::Pedestrian, attr::POSITION_X.to_owned()),
                (ObjectClass::Pedestrian, attr::POSITION_Y.to_owned()),
                (ObjectClass::TrafficLight, attr::LIGHT_STATE.to_owned()),
            ]
            .into(),
        }
    }

    /// Whether the brake rule fires on this history.
    pub fn triggered(history: &ObservationHistory) -> bool {
        let obs = history.latest().expect("non-empty history");
        let (x, y) = obs.viewer().expect("viewer sees itself").position();
        let pedestrian_ahead = obs.of_class(ObjectClass::Pedestrian).any(|p| {
            let (px, py) = p.position();
            (1..=WATCH_ROWS).contains(&(py - y)) && (px - x).abs() <= WATCH_HALF_WIDTH
        });
        let light_says_stop = y + 1 == STOP_ROW
            && obs
                .of_class(ObjectClass::TrafficLight)
                .any(|l| l.attr(attr::LIGHT_STATE) != attr::LIGHT_GREEN);
        pedestrian_ahead || light_says_stop
    }
}

impl Default for ScriptedDriver {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for ScriptedDriver {
    fn id(&self) -> &str {
        "scripted_driver"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let action = if Self::triggered(history) {
            "brake"
        } else {
            "go"
        };
        ActionDistribution::delta(&self.actions, action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

/// Skirmish ally that concentrates fire: attack the lowest-health enemy in
/// range (lowest id on ties), otherwise approach the nearest enemy.
pub struct FocusFirePolicy {
    actions: Vec<String>,
    deps: Dependencies,
}

impl FocusFirePolicy {
    pub fn new() -> Self {
        FocusFirePolicy {
            actions: super::skirmish::unit_actions(&["enemy1", "enemy2", "enemy3"]),
            deps: [
                (ObjectClass::EnemyUnit, attr::POSITION_X.to_owned()),
                (ObjectClass::EnemyUnit, attr::POSITION_Y.to_owned()),
                (ObjectClass::EnemyUnit, attr::HEALTH.to_owned()),
            ]
            .into(),
        }
    }
}

impl Default for FocusFirePolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for FocusFirePolicy {
    fn id(&self) -> &str {
        "focus_fire"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let obs = history.latest().expect("non-empty history");
        let here = obs.viewer().expect("viewer sees itself").position();
        let weakest_in_range = obs
            .of_class(ObjectClass::EnemyUnit)
            .filter(|e| chebyshev(here, e.position()) <= ATTACK_RANGE)
            .min_by(|a, b| {
                a.attr(attr::HEALTH)
                    .total_cmp(&b.attr(attr::HEALTH))
                    .then_with(|| a.object_id.cmp(&b.object_id))
            });
        let action = match weakest_in_range {
            Some(target) => format!("attack_{}", target.object_id),
            None => nearest(obs, here, ObjectClass::EnemyUnit)
                .and_then(|e| step_towards(here, e.position()))
                .unwrap_or("stay")
                .to_owned(),
        };
        ActionDistribution::delta(&self.actions, &action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

/// Reads nothing and always plays the same action.
pub struct BlindPolicy {
    actions: Vec<String>,
    action: &'static str,
    deps: Dependencies,
}

impl BlindPolicy {
    pub fn new(actions: Vec<String>, action: &'static str) -> Self {
        BlindPolicy {
            actions,
            action,
            deps: Dependencies::new(),
        }
    }
}

impl Policy for BlindPolicy {
    fn id(&self) -> &str {
        "blind"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, _history: &ObservationHistory) -> ActionDistribution {
        ActionDistribution::delta(&self.actions, self.action)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

pub struct RandomPolicy {
    actions: Vec<String>,
    deps: Dependencies,
}

impl RandomPolicy {
    pub fn new(actions: Vec<String>) -> Self {
        RandomPolicy {
            actions,
            deps: Dependencies::new(),
        }
    }
}

impl Policy for RandomPolicy {
    fn id(&self) -> &str {
        "random"
    }

    fn action_set(&self) -> &[String] {
        &self.actions
    }

    fn act(&self, _history: &ObservationHistory) -> ActionDistribution {
        ActionDistribution::uniform(&self.actions)
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        Some(&self.deps)
    }
}

/// Opt-in stochastic wrapper: softmax of the inner policy's probabilities
/// divided by `temperature`. Lower temperatures approach the inner policy.
pub struct SoftmaxPolicy {
    inner: Arc<dyn Policy>,
    temperature: f64,
    id: String,
}

impl SoftmaxPolicy {
    pub fn new(inner: Arc<dyn Policy>, temperature: f64) -> Self {
        let id = format!("softmax:{temperature}:{}", inner.id());
        SoftmaxPolicy {
            inner,
            temperature,
            id,
        }
    }
}

impl Policy for SoftmaxPolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn action_set(&self) -> &[String] {
        self.inner.action_set()
    }

    fn act(&self, history: &ObservationHistory) -> ActionDistribution {
        let base = self.inner.act(history);
        let max = base.probabilities.iter().cloned().fold(f64::MIN, f64::max);
        let weights: Vec<f64> = base
            .probabilities
            .iter()
            .map(|p| ((p - max) / self.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        ActionDistribution {
            action_set: base.action_set,
            probabilities: weights.into_iter().map(|w| w / total).collect(),
        }
    }

    fn declared_dependencies(&self) -> Option<&Dependencies> {
        self.inner.declared_dependencies()
    }
}

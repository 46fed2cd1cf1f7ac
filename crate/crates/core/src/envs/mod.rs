//! Deterministic grid-world environments with oracle segmentation.
//!
//! Two worlds ship: `traffic` (an ego car, scripted traffic, crossing
//! pedestrians and a timed light) and `skirmish` (three allies against three
//! scripted enemies). Every entity that behaves is driven by a [`Policy`]
//! evaluated on its own observation history, so any entity can sit in an
//! influence graph.

mod policies;
mod qlearn;
mod skirmish;
mod traffic;

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    chebyshev, ActionDistribution, ModelError, ObjectClass, ObjectId, ObjectSnapshot, Observation,
    ObservationHistory, Policy,
};

pub use policies::{
    resolve_policy, BlindPolicy, FocusFirePolicy, RandomPolicy, ScriptedDriver, SoftmaxPolicy,
};
pub use qlearn::{train_tabular_q, QParams, TabularQPolicy};
pub use skirmish::Skirmish;
pub use traffic::Traffic;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("state at step {0} is terminal")]
    TerminalState(u32),
    #[error("no action supplied for agent `{0}`")]
    MissingAction(ObjectId),
    #[error("action `{action}` is not available to `{agent}`")]
    InvalidAction { agent: ObjectId, action: String },
    #[error("viewer `{0}` is not alive")]
    DeadViewer(ObjectId),
    #[error("entity `{0}` is static and has no behaviour")]
    StaticEntity(ObjectId),
    #[error("entity `{0}` is not alive")]
    DeadEntity(ObjectId),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("policy file: {0}")]
    PolicyFile(String),
    #[error("invalid training parameter: {0}")]
    InvalidHyperparameter(String),
    #[error("episode does not replay: {0}")]
    NonReplayable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Actions chosen by the controllable agents at one step.
pub type JointAction = BTreeMap<ObjectId, String>;

/// Full ground truth of a world at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub step: u32,
    pub rng_seed: u64,
    /// Living entities sorted by id.
    pub entities: Vec<ObjectSnapshot>,
    pub terminal: bool,
    /// Cumulative reward per controllable agent.
    pub score: BTreeMap<ObjectId, f64>,
}

impl WorldState {
    pub fn entity(&self, id: &ObjectId) -> Option<&ObjectSnapshot> {
        self.entities
            .binary_search_by(|e| e.object_id.cmp(id))
            .ok()
            .map(|i| &self.entities[i])
    }

    pub fn entity_mut(&mut self, id: &ObjectId) -> Option<&mut ObjectSnapshot> {
        self.entities
            .binary_search_by(|e| e.object_id.cmp(id))
            .ok()
            .map(move |i| &mut self.entities[i])
    }

    pub fn is_alive(&self, id: &ObjectId) -> bool {
        self.entity(id).is_some()
    }

    pub fn remove(&mut self, id: &ObjectId) -> Option<ObjectSnapshot> {
        let i = self
            .entities
            .binary_search_by(|e| e.object_id.cmp(id))
            .ok()?;
        Some(self.entities.remove(i))
    }

    fn sort_entities(&mut self) {
        self.entities.sort_by(|a, b| a.object_id.cmp(&b.object_id));
    }
}

/// A recorded rollout: `frames[t + 1]` is the result of `actions[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub env_name: String,
    pub seed: u64,
    pub frames: Vec<WorldState>,
    pub actions: Vec<JointAction>,
    /// Policy spec per controllable agent, see [`resolve_policy`].
    pub policies: BTreeMap<ObjectId, String>,
    /// Step cap the episode was recorded with; re-simulations use it too.
    #[serde(default)]
    pub max_steps: usize,
}

impl Episode {
    pub fn env(&self) -> Result<&'static dyn Environment, EnvError> {
        env_by_name(&self.env_name)
    }

    /// Number of decision steps.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, step: u32) -> Option<&WorldState> {
        self.frames.get(step as usize)
    }

    /// Re-simulates from `(seed, actions)` and checks every frame matches.
    pub fn verify_replay(&self) -> Result<(), EnvError> {
        let env = self.env()?;
        if self.actions.len() + 1 != self.frames.len() {
            return Err(EnvError::NonReplayable(format!(
                "{} frames but {} action steps",
                self.frames.len(),
                self.actions.len()
            )));
        }
        let mut state = env.reset(self.seed);
        if state != self.frames[0] {
            return Err(EnvError::NonReplayable("initial frame differs".into()));
        }
        for (t, joint) in self.actions.iter().enumerate() {
            state = env
                .step(&state, joint)
                .map_err(|e| EnvError::NonReplayable(format!("step {t}: {e}")))?;
            if state != self.frames[t + 1] {
                return Err(EnvError::NonReplayable(format!("frame {} differs", t + 1)));
            }
        }
        Ok(())
    }
}

/// A deterministic world. Implementations are stateless; all state lives in
/// [`WorldState`] values.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;

    /// (width, height) in cells.
    fn grid(&self) -> (i64, i64);

    fn reset(&self, seed: u64) -> WorldState;

    fn step(&self, state: &WorldState, joint: &JointAction) -> Result<WorldState, EnvError>;

    /// Chebyshev visibility radius; `None` means the whole map is visible.
    fn visibility_radius(&self) -> Option<i64>;

    /// Ids of the agents driven by user-supplied policies.
    fn agent_ids(&self) -> &[ObjectId];

    fn agent_action_set(&self) -> &[String];

    /// Built-in behaviour for a dynamic entity that is not an agent.
    fn npc_policy(&self, class: ObjectClass) -> Option<Arc<dyn Policy>>;

    /// Entity classes that appear in this world.
    fn classes(&self) -> &[ObjectClass];

    /// Policy spec used for agents when none is given.
    fn default_policy(&self) -> &'static str;

    fn is_agent(&self, id: &ObjectId) -> bool {
        self.agent_ids().contains(id)
    }
}

static TRAFFIC: LazyLock<Traffic> = LazyLock::new(Traffic::new);
static SKIRMISH: LazyLock<Skirmish> = LazyLock::new(Skirmish::new);

pub const ENV_NAMES: [&str; 2] = ["traffic", "skirmish"];

pub fn env_by_name(name: &str) -> Result<&'static dyn Environment, EnvError> {
    match name {
        "traffic" => Ok(&*TRAFFIC),
        "skirmish" => Ok(&*SKIRMISH),
        other => Err(EnvError::UnknownEnv(other.to_owned())),
    }
}

pub fn env_reset(env_name: &str, seed: u64) -> Result<WorldState, EnvError> {
    Ok(env_by_name(env_name)?.reset(seed))
}

pub fn env_step(
    env_name: &str,
    state: &WorldState,
    joint: &JointAction,
) -> Result<WorldState, EnvError> {
    env_by_name(env_name)?.step(state, joint)
}

/// Snapshots of every living entity within the viewer's visibility radius,
/// viewer included, in id order.
pub fn oracle_segmentation(
    env: &dyn Environment,
    state: &WorldState,
    viewer_id: &ObjectId,
) -> Result<Observation, EnvError> {
    let viewer = state
        .entity(viewer_id)
        .ok_or_else(|| EnvError::DeadViewer(viewer_id.clone()))?;
    let origin = viewer.position();
    let objects = state
        .entities
        .iter()
        .filter(|e| match env.visibility_radius() {
            Some(r) => chebyshev(origin, e.position()) <= r,
            None => true,
        })
        .cloned()
        .collect();
    Ok(Observation {
        step: state.step,
        viewer_id: viewer_id.clone(),
        objects,
        masked_ids: Default::default(),
    })
}

/// The policies that drive every dynamic entity of one rollout.
#[derive(Clone)]
pub struct Controllers {
    env: &'static dyn Environment,
    agents: BTreeMap<ObjectId, Arc<dyn Policy>>,
}

impl std::fmt::Debug for Controllers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controllers")
            .field("env", &self.env.name())
            .field("agents", &self.agents)
            .finish()
    }
}

impl Controllers {
    pub fn new(
        env: &'static dyn Environment,
        agents: BTreeMap<ObjectId, Arc<dyn Policy>>,
    ) -> Result<Self, EnvError> {
        for id in env.agent_ids() {
            if !agents.contains_key(id) {
                return Err(EnvError::UnknownPolicy(format!(
                    "no policy for agent `{id}`"
                )));
            }
        }
        Ok(Controllers { env, agents })
    }

    /// Resolves policy specs (see [`resolve_policy`]); agents missing from
    /// `specs` get the environment's default policy.
    pub fn from_specs(
        env: &'static dyn Environment,
        specs: &BTreeMap<ObjectId, String>,
    ) -> Result<Self, EnvError> {
        let mut agents = BTreeMap::new();
        for id in env.agent_ids() {
            let spec = specs
                .get(id)
                .map(String::as_str)
                .unwrap_or(env.default_policy());
            agents.insert(id.clone(), resolve_policy(env.name(), spec)?);
        }
        if let Some(extra) = specs.keys().find(|k| !env.is_agent(k)) {
            return Err(EnvError::UnknownPolicy(format!(
                "`{extra}` is not an agent of {}",
                env.name()
            )));
        }
        Ok(Controllers { env, agents })
    }

    /// One policy for every agent.
    pub fn uniform(env: &'static dyn Environment, spec: &str) -> Result<Self, EnvError> {
        let specs = env
            .agent_ids()
            .iter()
            .map(|id| (id.clone(), spec.to_owned()))
            .collect();
        Self::from_specs(env, &specs)
    }

    pub fn for_episode(episode: &Episode) -> Result<Self, EnvError> {
        Self::from_specs(episode.env()?, &episode.policies)
    }

    pub fn env(&self) -> &'static dyn Environment {
        self.env
    }

    pub fn agent(&self, id: &ObjectId) -> Option<&Arc<dyn Policy>> {
        self.agents.get(id)
    }

    pub fn agents(&self) -> &BTreeMap<ObjectId, Arc<dyn Policy>> {
        &self.agents
    }

    /// Policy behind a dynamic entity; `None` for static entities.
    pub fn policy_for(&self, entity: &ObjectSnapshot) -> Option<Arc<dyn Policy>> {
        if !entity.dynamic {
            return None;
        }
        self.agents
            .get(&entity.object_id)
            .cloned()
            .or_else(|| self.env.npc_policy(entity.class_name))
    }
}

/// Next-action distribution of a dynamic, living entity.
pub fn entity_behavior_distribution(
    controllers: &Controllers,
    state: &WorldState,
    entity_id: &ObjectId,
    history: &ObservationHistory,
) -> Result<ActionDistribution, EnvError> {
    let entity = state
        .entity(entity_id)
        .ok_or_else(|| EnvError::DeadEntity(entity_id.clone()))?;
    let policy = controllers
        .policy_for(entity)
        .ok_or_else(|| EnvError::StaticEntity(entity_id.clone()))?;
    Ok(policy.act(history))
}

/// Per-entity observation histories over a growing list of frames.
#[derive(Debug, Clone, Default)]
pub struct ObservationLog {
    histories: BTreeMap<ObjectId, Vec<Arc<Observation>>>,
}

impl ObservationLog {
    pub fn from_frames(env: &dyn Environment, frames: &[WorldState]) -> Self {
        let mut log = ObservationLog::default();
        for frame in frames {
            log.push_frame(env, frame);
        }
        log
    }

    /// Segments `frame` for every living dynamic entity.
    pub fn push_frame(&mut self, env: &dyn Environment, frame: &WorldState) {
        for e in frame.entities.iter().filter(|e| e.dynamic) {
            let obs = oracle_segmentation(env, frame, &e.object_id)
                .expect("entity taken from the frame is alive");
            self.histories
                .entry(e.object_id.clone())
                .or_default()
                .push(Arc::new(obs));
        }
    }

    /// History of `viewer` from its first frame up to and including `step`.
    pub fn history(&self, viewer: &ObjectId, step: u32) -> Option<ObservationHistory> {
        let frames = self.histories.get(viewer)?;
        let first = frames.first()?.step;
        let end = (step.checked_sub(first)? as usize) + 1;
        if end > frames.len() {
            return None;
        }
        Some(ObservationHistory {
            viewer_id: viewer.clone(),
            frames: frames[..end].to_vec(),
        })
    }

    pub fn observation(&self, viewer: &ObjectId, step: u32) -> Option<&Arc<Observation>> {
        let frames = self.histories.get(viewer)?;
        let first = frames.first()?.step;
        frames.get(step.checked_sub(first)? as usize)
    }
}

/// Picks a concrete action from a distribution. Stochastic choices draw from
/// a stream keyed by (seed, step) so replays and what-if branches see the
/// same randomness; `slot` is the agent's index among the agents.
pub fn choose_action(dist: &ActionDistribution, seed: u64, step: u32, slot: usize) -> String {
    if dist.is_delta() {
        return dist.mode().to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    let mut u = 0.0;
    for _ in 0..=slot {
        u = rng.gen::<f64>();
    }
    dist.sample_with(u).to_owned()
}

/// Runs the controllers forward from the last frame until the world is
/// terminal or `frames` holds `max_steps + 1` entries. `hook` may edit each
/// new state before agents observe it.
pub fn roll_forward<F>(
    controllers: &Controllers,
    frames: &mut Vec<WorldState>,
    actions: &mut Vec<JointAction>,
    max_steps: usize,
    mut hook: F,
) -> Result<(), EnvError>
where
    F: FnMut(&mut WorldState) -> Result<(), EnvError>,
{
    let env = controllers.env();
    let mut log = ObservationLog::from_frames(env, frames);
    while frames.len() <= max_steps {
        let state = frames.last().expect("at least the initial frame");
        if state.terminal {
            break;
        }
        let mut joint = JointAction::new();
        for (slot, id) in env.agent_ids().iter().enumerate() {
            if !state.is_alive(id) {
                continue;
            }
            let history = log
                .history(id, state.step)
                .expect("living agent has a history");
            let policy = controllers.agent(id).expect("controllers cover all agents");
            let dist = policy.act(&history);
            joint.insert(
                id.clone(),
                choose_action(&dist, state.rng_seed, state.step, slot),
            );
        }
        let mut next = env.step(state, &joint)?;
        hook(&mut next)?;
        log.push_frame(env, &next);
        frames.push(next);
        actions.push(joint);
    }
    Ok(())
}

/// Rolls out a fresh episode.
pub fn rollout(
    env_name: &str,
    seed: u64,
    policies: &BTreeMap<ObjectId, String>,
    max_steps: usize,
) -> Result<Episode, EnvError> {
    let env = env_by_name(env_name)?;
    let controllers = Controllers::from_specs(env, policies)?;
    let mut frames = vec![env.reset(seed)];
    let mut actions = Vec::new();
    roll_forward(&controllers, &mut frames, &mut actions, max_steps, |_| {
        Ok(())
    })?;
    let policies = env
        .agent_ids()
        .iter()
        .map(|id| {
            let spec = policies
                .get(id)
                .cloned()
                .unwrap_or_else(|| env.default_policy().to_owned());
            (id.clone(), spec)
        })
        .collect();
    Ok(Episode {
        env_name: env_name.to_owned(),
        seed,
        frames,
        actions,
        policies,
        max_steps,
    })
}

/// Builds the action label list for a set of `&str`s.
pub(crate) fn labels(actions: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = actions.iter().map(|s| s.to_string()).collect();
    v.sort();
    v
}

/// One cell in the given heading (0 = N (+y), 1 = E (+x), 2 = S, 3 = W).
pub(crate) fn offset(heading: f64, cells: i64) -> (i64, i64) {
    match heading.round() as i64 {
        0 => (0, cells),
        1 => (cells, 0),
        2 => (0, -cells),
        _ => (-cells, 0),
    }
}

pub(crate) fn in_bounds((x, y): (i64, i64), (w, h): (i64, i64)) -> bool {
    (0..w).contains(&x) && (0..h).contains(&y)
}

/// A move one cell towards `to` along the axis with the larger gap,
/// preferring x on ties. `None` when already there.
pub(crate) fn step_towards(from: (i64, i64), to: (i64, i64)) -> Option<&'static str> {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    if dx == 0 && dy == 0 {
        return None;
    }
    Some(if dx.abs() >= dy.abs() {
        if dx > 0 {
            "move_E"
        } else {
            "move_W"
        }
    } else if dy > 0 {
        "move_N"
    } else {
        "move_S"
    })
}

pub(crate) fn move_delta(action: &str) -> Option<(i64, i64)> {
    match action {
        "move_N" => Some((0, 1)),
        "move_E" => Some((1, 0)),
        "move_S" => Some((0, -1)),
        "move_W" => Some((-1, 0)),
        _ => None,
    }
}

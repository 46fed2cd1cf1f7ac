//! Shared domain types: object snapshots, per-agent observations and
//! histories, action distributions, the policy contract, and counterfactual
//! masking of observations.
//!
//! Observations are structured object lists rather than images. Masking an
//! object removes its snapshot outright and records the id in `masked_ids`,
//! which is the structured counterpart of zeroing the object's pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating that a distribution sums to one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("cannot mask the viewer `{0}` out of its own observation")]
    MaskViewer(ObjectId),
    #[error("object `{object}` is not visible at step {step}")]
    UnknownObject { object: ObjectId, step: u32 },
    #[error("step {step} is outside the history range 0..={last}")]
    StepOutOfRange { step: u32, last: u32 },
    #[error("invalid action distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
}

/// Stable entity identifier, e.g. `ego`, `ped1`, `enemy2`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        ObjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Trailing decimal index of the id (`enemy2` -> 2), if any.
    pub fn ordinal(&self) -> Option<u32> {
        let digits: String = self
            .0
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        digits.parse().ok()
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_owned())
    }
}

impl From<String> for ObjectId {
    fn from(s: String) -> Self {
        ObjectId(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    TrafficLight,
    AllyUnit,
    EnemyUnit,
    Obstacle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Vehicle,
        ObjectClass::Pedestrian,
        ObjectClass::TrafficLight,
        ObjectClass::AllyUnit,
        ObjectClass::EnemyUnit,
        ObjectClass::Obstacle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::TrafficLight => "traffic_light",
            ObjectClass::AllyUnit => "ally_unit",
            ObjectClass::EnemyUnit => "enemy_unit",
            ObjectClass::Obstacle => "obstacle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Attribute names every snapshot of this class carries.
    pub fn schema(self) -> &'static [&'static str] {
        match self {
            ObjectClass::Vehicle | ObjectClass::Pedestrian => &[
                attr::HEADING,
                attr::POSITION_X,
                attr::POSITION_Y,
                attr::SPEED,
            ],
            ObjectClass::TrafficLight => &[attr::LIGHT_STATE, attr::POSITION_X, attr::POSITION_Y],
            ObjectClass::AllyUnit | ObjectClass::EnemyUnit => {
                &[attr::HEALTH, attr::POSITION_X, attr::POSITION_Y]
            }
            ObjectClass::Obstacle => &[attr::POSITION_X, attr::POSITION_Y],
        }
    }

    /// Inclusive value range accepted for an attribute of this class, given
    /// the world's grid size.
    pub fn attribute_range(self, attribute: &str, grid: (i64, i64)) -> Option<(f64, f64)> {
        if !self.schema().contains(&attribute) {
            return None;
        }
        Some(match attribute {
            attr::POSITION_X => (0.0, (grid.0 - 1) as f64),
            attr::POSITION_Y => (0.0, (grid.1 - 1) as f64),
            attr::SPEED => (0.0, 2.0),
            attr::HEADING => (0.0, 3.0),
            attr::HEALTH => (0.0, 100.0),
            attr::LIGHT_STATE => (0.0, 2.0),
            _ => return None,
        })
    }

    /// Attributes that only take integer values.
    pub fn is_integral(attribute: &str) -> bool {
        matches!(
            attribute,
            attr::POSITION_X | attr::POSITION_Y | attr::HEADING | attr::LIGHT_STATE
        )
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attribute names and the numeric encodings of categorical attributes.
pub mod attr {
    pub const POSITION_X: &str = "position_x";
    pub const POSITION_Y: &str = "position_y";
    pub const SPEED: &str = "speed";
    pub const HEADING: &str = "heading";
    pub const HEALTH: &str = "health";
    pub const LIGHT_STATE: &str = "light_state";

    pub const HEADING_N: f64 = 0.0;
    pub const HEADING_E: f64 = 1.0;
    pub const HEADING_S: f64 = 2.0;
    pub const HEADING_W: f64 = 3.0;

    pub const LIGHT_RED: f64 = 0.0;
    pub const LIGHT_GREEN: f64 = 1.0;
    pub const LIGHT_YELLOW: f64 = 2.0;
}

/// One detected entity at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSnapshot {
    pub object_id: ObjectId,
    pub class_name: ObjectClass,
    pub attributes: BTreeMap<String, f64>,
    pub dynamic: bool,
}

impl ObjectSnapshot {
    pub fn new(
        object_id: impl Into<String>,
        class_name: ObjectClass,
        dynamic: bool,
        attributes: impl IntoIterator<Item = (&'static str, f64)>,
    ) -> Self {
        ObjectSnapshot {
            object_id: ObjectId::new(object_id),
            class_name,
            attributes: attributes
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect(),
            dynamic,
        }
    }

    pub fn get(&self, attribute: &str) -> Option<f64> {
        self.attributes.get(attribute).copied()
    }

    /// Attribute value, or 0 when absent. Snapshots validated against their
    /// class schema always carry the attributes the environments read.
    pub fn attr(&self, attribute: &str) -> f64 {
        self.get(attribute).unwrap_or(0.0)
    }

    pub fn position(&self) -> (i64, i64) {
        (
            self.attr(attr::POSITION_X).round() as i64,
            self.attr(attr::POSITION_Y).round() as i64,
        )
    }

    pub fn set_position(&mut self, (x, y): (i64, i64)) {
        self.attributes.insert(attr::POSITION_X.into(), x as f64);
        self.attributes.insert(attr::POSITION_Y.into(), y as f64);
    }

    /// Checks the attribute set against the class schema and the world bounds.
    pub fn validate(&self, grid: (i64, i64)) -> Result<(), ModelError> {
        let schema = self.class_name.schema();
        if self.attributes.len() != schema.len()
            || !schema.iter().all(|a| self.attributes.contains_key(*a))
        {
            return Err(ModelError::InvalidObservation(format!(
                "`{}` attributes do not match the {} schema",
                self.object_id, self.class_name
            )));
        }
        for (name, value) in &self.attributes {
            let (lo, hi) = self
                .class_name
                .attribute_range(name, grid)
                .expect("schema checked above");
            if !(lo..=hi).contains(value) {
                return Err(ModelError::InvalidObservation(format!(
                    "`{}`.{name} = {value} outside [{lo}, {hi}]",
                    self.object_id
                )));
            }
        }
        Ok(())
    }
}

/// Chebyshev (king-move) distance between two grid cells.
pub fn chebyshev((ax, ay): (i64, i64), (bx, by): (i64, i64)) -> i64 {
    (ax - bx).abs().max((ay - by).abs())
}

/// One agent's structured view of the world at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: u32,
    pub viewer_id: ObjectId,
    pub objects: Vec<ObjectSnapshot>,
    #[serde(default)]
    pub masked_ids: BTreeSet<ObjectId>,
}

impl Observation {
    pub fn get(&self, id: &ObjectId) -> Option<&ObjectSnapshot> {
        self.objects.iter().find(|o| &o.object_id == id)
    }

    /// The viewer's own snapshot.
    pub fn viewer(&self) -> Option<&ObjectSnapshot> {
        self.get(&self.viewer_id)
    }

    pub fn of_class(&self, class: ObjectClass) -> impl Iterator<Item = &ObjectSnapshot> {
        self.objects.iter().filter(move |o| o.class_name == class)
    }

    pub fn is_visible(&self, id: &ObjectId) -> bool {
        self.get(id).is_some()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.masked_ids.contains(&self.viewer_id) {
            return Err(ModelError::InvalidObservation(
                "viewer listed as masked".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if self.masked_ids.contains(&o.object_id) {
                return Err(ModelError::InvalidObservation(format!(
                    "`{}` is both masked and present",
                    o.object_id
                )));
            }
            if !seen.insert(&o.object_id) {
                return Err(ModelError::InvalidObservation(format!(
                    "duplicate object `{}`",
                    o.object_id
                )));
            }
        }
        Ok(())
    }
}

/// Counterfactually remove `target` from an observation.
pub fn mask_object(obs: &Observation, target: &ObjectId) -> Result<Observation, ModelError> {
    if *target == obs.viewer_id {
        return Err(ModelError::MaskViewer(target.clone()));
    }
    if !obs.is_visible(target) {
        return Err(ModelError::UnknownObject {
            object: target.clone(),
            step: obs.step,
        });
    }
    let mut masked = Observation {
        step: obs.step,
        viewer_id: obs.viewer_id.clone(),
        objects: obs
            .objects
            .iter()
            .filter(|o| &o.object_id != target)
            .cloned()
            .collect(),
        masked_ids: obs.masked_ids.clone(),
    };
    masked.masked_ids.insert(target.clone());
    Ok(masked)
}

/// The sequence of one agent's observations from step 0 up to some step.
/// Frames are reference counted so masked variants share untouched frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory {
    pub viewer_id: ObjectId,
    pub frames: Vec<Arc<Observation>>,
}

impl ObservationHistory {
    pub fn new(viewer_id: ObjectId, frames: Vec<Arc<Observation>>) -> Result<Self, ModelError> {
        let first = frames.first().map(|f| f.step).unwrap_or(0);
        for (offset, frame) in frames.iter().enumerate() {
            if frame.viewer_id != viewer_id {
                return Err(ModelError::InvalidObservation(format!(
                    "frame {} belongs to `{}`, not `{viewer_id}`",
                    frame.step, frame.viewer_id
                )));
            }
            if frame.step != first + offset as u32 {
                return Err(ModelError::InvalidObservation(
                    "history frames are not contiguous".into(),
                ));
            }
        }
        Ok(ObservationHistory { viewer_id, frames })
    }

    pub fn latest(&self) -> Option<&Observation> {
        self.frames.last().map(Arc::as_ref)
    }

    pub fn last_step(&self) -> Option<u32> {
        self.frames.last().map(|f| f.step)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_at(&self, step: u32) -> Option<&Observation> {
        let first = self.frames.first()?.step;
        let idx = step.checked_sub(first)? as usize;
        self.frames.get(idx).map(Arc::as_ref)
    }
}

/// Mask `target` in the single frame at `at_step`; every other frame is shared.
pub fn mask_history(
    hist: &ObservationHistory,
    target: &ObjectId,
    at_step: u32,
) -> Result<ObservationHistory, ModelError> {
    let first = hist.frames.first().map(|f| f.step).unwrap_or(0);
    let last = hist.last_step().unwrap_or(0);
    if hist.is_empty() || at_step < first || at_step > last {
        return Err(ModelError::StepOutOfRange {
            step: at_step,
            last,
        });
    }
    let idx = (at_step - first) as usize;
    let masked = mask_object(&hist.frames[idx], target)?;
    let mut frames = hist.frames.clone();
    frames[idx] = Arc::new(masked);
    Ok(ObservationHistory {
        viewer_id: hist.viewer_id.clone(),
        frames,
    })
}

/// A probability vector over an ordered, finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub action_set: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(action_set: Vec<String>, probabilities: Vec<f64>) -> Result<Self, ModelError> {
        if action_set.len() != probabilities.len() {
            return Err(ModelError::InvalidDistribution(format!(
                "{} actions but {} probabilities",
                action_set.len(),
                probabilities.len()
            )));
        }
        if action_set.is_empty() {
            return Err(ModelError::InvalidDistribution("empty action set".into()));
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::InvalidDistribution(
                "probability outside [0, 1]".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(ActionDistribution {
            action_set,
            probabilities,
        })
    }

    /// All mass on `action`. Panics if `action` is not in `action_set`.
    pub fn delta(action_set: &[String], action: &str) -> Self {
        let probabilities = action_set
            .iter()
            .map(|a| if a == action { 1.0 } else { 0.0 })
            .collect::<Vec<_>>();
        assert!(
            probabilities.contains(&1.0),
            "action `{action}` not in action set {action_set:?}"
        );
        ActionDistribution {
            action_set: action_set.to_vec(),
            probabilities,
        }
    }

    pub fn uniform(action_set: &[String]) -> Self {
        let p = 1.0 / action_set.len() as f64;
        ActionDistribution {
            action_set: action_set.to_vec(),
            probabilities: vec![p; action_set.len()],
        }
    }

    pub fn probability(&self, action: &str) -> f64 {
        self.action_set
            .iter()
            .position(|a| a == action)
            .map_or(0.0, |i| self.probabilities[i])
    }

    /// Most likely action; ties go to the earlier action in `action_set`.
    pub fn mode(&self) -> &str {
        let mut best = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > self.probabilities[best] {
                best = i;
            }
        }
        &self.action_set[best]
    }

    pub fn is_delta(&self) -> bool {
        self.probabilities.iter().filter(|p| **p == 1.0).count() == 1
    }

    /// Inverse-CDF sample given a uniform draw in [0, 1).
    pub fn sample_with(&self, u: f64) -> &str {
        let mut acc = 0.0;
        for (a, p) in self.action_set.iter().zip(&self.probabilities) {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.mode()
    }
}

/// (class, attribute) pairs a policy reads.
pub type Dependencies = BTreeSet<(ObjectClass, String)>;

/// Behavioural interface of anything that picks actions from an
/// observation history: trained agents, scripted agents and scripted NPCs.
///
/// `act` must be a pure function of the history. Deterministic policies
/// return delta distributions.
pub trait Policy: Send + Sync {
    /// Identifier used as a cache key; equal ids must mean equal behaviour.
    fn id(&self) -> &str;

    fn action_set(&self) -> &[String];

    fn act(&self, history: &ObservationHistory) -> ActionDistribution;

    /// Ground-truth inputs, populated for scripted policies only.
    fn declared_dependencies(&self) -> Option<&Dependencies> {
        None
    }

    /// Whether masking objects of `class` can change this policy's output,
    /// according to its declared dependencies. `None` when undeclared.
    fn may_read_class(&self, class: ObjectClass) -> Option<bool> {
        self.declared_dependencies()
            .map(|deps| deps.iter().any(|(c, _)| *c == class))
    }
}

impl fmt::Debug for dyn Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Policy").field("id", &self.id()).finish()
    }
}

/// Debug character raster of an observation, `h` rows by `w` columns, row 0
/// printed last so that +y points up. Only the UI uses this.
pub fn rasterize(obs: &Observation, h: usize, w: usize) -> Vec<String> {
    let mut grid = vec![vec!['.'; w]; h];
    for o in &obs.objects {
        let (x, y) = o.position();
        if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
            continue;
        }
        let glyph = match o.class_name {
            ObjectClass::Vehicle if o.object_id == obs.viewer_id => '@',
            ObjectClass::Vehicle => 'V',
            ObjectClass::Pedestrian => 'P',
            ObjectClass::TrafficLight => 'L',
            ObjectClass::AllyUnit if o.object_id == obs.viewer_id => '@',
            ObjectClass::AllyUnit => 'A',
            ObjectClass::EnemyUnit => 'E',
            ObjectClass::Obstacle => '#',
        };
        grid[y as usize][x as usize] = glyph;
    }
    grid.into_iter()
        .rev()
        .map(|row| row.into_iter().collect())
        .collect()
}

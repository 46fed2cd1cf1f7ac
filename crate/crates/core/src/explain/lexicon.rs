//! Per-environment phrase tables that fill the explanation template.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{env_by_name, Environment};
use crate::model::{ObjectClass, ObjectId};

/// Outcome patterns a purpose rule can match, see [`super::outcome_pattern`].
pub const PATTERNS: [&str; 4] = ["collision", "damaged", "defeated", "no-collision"];

const TRAFFIC: &str = include_str!("../../lexicons/traffic.json");
const SKIRMISH: &str = include_str!("../../lexicons/skirmish.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LexiconError {
    #[error("lexicon is not valid JSON: {0}")]
    Parse(String),
    #[error("lexicon is missing {0}")]
    Missing(String),
    #[error("no lexicon ships for environment `{0}`")]
    UnknownEnv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPhrases {
    /// Noun phrase; `{n}` is replaced by the object's ordinal.
    pub noun: String,
    pub stationary: String,
    /// Divisor applied to each attribute's delta before comparing.
    pub scales: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurposeRule {
    pub action: String,
    pub class: String,
    pub pattern: String,
    /// `{object}` is replaced by the effect object's noun.
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub classes: BTreeMap<String, ClassPhrases>,
    /// Keyed by `attribute,+` or `attribute,-`.
    pub behaviors: BTreeMap<String, String>,
    pub actions: BTreeMap<String, String>,
    /// First matching rule wins; `*` matches any run of characters.
    pub purposes: Vec<PurposeRule>,
}

impl Lexicon {
    /// The lexicon shipped for `env_name`.
    pub fn builtin(env_name: &str) -> Result<Self, LexiconError> {
        let text = match env_name {
            "traffic" => TRAFFIC,
            "skirmish" => SKIRMISH,
            other => return Err(LexiconError::UnknownEnv(other.to_owned())),
        };
        let env = env_by_name(env_name).expect("shipped environment");
        Self::parse(text, env)
    }

    /// Parses a lexicon and checks it covers every class, attribute, action
    /// and outcome pattern of `env`.
    pub fn parse(text: &str, env: &dyn Environment) -> Result<Self, LexiconError> {
        let lexicon: Lexicon =
            serde_json::from_str(text).map_err(|e| LexiconError::Parse(e.to_string()))?;
        lexicon.validate(env)?;
        Ok(lexicon)
    }

    pub fn validate(&self, env: &dyn Environment) -> Result<(), LexiconError> {
        let missing = |what: String| Err(LexiconError::Missing(what));
        for &class in env.classes() {
            let Some(entry) = self.classes.get(class.as_str()) else {
                return missing(format!("class `{}`", class.as_str()));
            };
            for &attribute in class.schema() {
                match entry.scales.get(attribute) {
                    Some(s) if *s > 0.0 => {}
                    _ => {
                        return missing(format!(
                            "a positive scale for `{}.{attribute}`",
                            class.as_str()
                        ))
                    }
                }
                for sign in ['+', '-'] {
                    if !self.behaviors.contains_key(&format!("{attribute},{sign}")) {
                        return missing(format!("behavior `{attribute},{sign}`"));
                    }
                }
            }
        }
        for action in env.agent_action_set() {
            if !self.actions.contains_key(action) {
                return missing(format!("action `{action}`"));
            }
            for &class in env.classes() {
                for pattern in PATTERNS {
                    if self.purpose_rule(action, class, pattern).is_none() {
                        return missing(format!(
                            "a purpose for ({action}, {}, {pattern})",
                            class.as_str()
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn noun(&self, class: ObjectClass, id: &ObjectId) -> Option<String> {
        let entry = self.classes.get(class.as_str())?;
        let n = id.ordinal().map(|n| n.to_string()).unwrap_or_default();
        Some(entry.noun.replace("{n}", &n))
    }

    pub fn verb(&self, action: &str) -> Option<&str> {
        self.actions.get(action).map(String::as_str)
    }

    fn purpose_rule(
        &self,
        action: &str,
        class: ObjectClass,
        pattern: &str,
    ) -> Option<&PurposeRule> {
        self.purposes.iter().find(|r| {
            wildcard(&r.action, action)
                && wildcard(&r.class, class.as_str())
                && wildcard(&r.pattern, pattern)
        })
    }

    /// Purpose phrase for an effect on `object` after `action`.
    pub fn purpose(
        &self,
        action: &str,
        class: ObjectClass,
        pattern: &str,
        object: &ObjectId,
    ) -> Option<String> {
        let rule = self.purpose_rule(action, class, pattern)?;
        let noun = self.noun(class, object)?;
        Some(rule.phrase.replace("{object}", &noun))
    }
}

/// Glob match where `*` stands for any (possibly empty) substring.
fn wildcard(pattern: &str, text: &str) -> bool {
    let mut parts = pattern.split('*');
    let first = parts.next().unwrap_or("");
    let Some(mut rest) = text.strip_prefix(first) else {
        return false;
    };
    let tail: Vec<&str> = parts.collect();
    let Some((last, middle)) = tail.split_last() else {
        return rest.is_empty();
    };
    for piece in middle {
        match rest.find(piece) {
            Some(i) => rest = &rest[i + piece.len()..],
            None => return false,
        }
    }
    rest.len() >= last.len() && rest.ends_with(last)
}

//! The episodic diagnosis MDP.
//!
//! An observation holds one slot per feature; a slot is `-1` until the feature
//! is queried and the record has a value for it. Actions are indexed with the
//! feature actions first (`0..m`) followed by one diagnostic action per class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{PatientRecord, Schema, UseCase};

/// Observation value of a feature that has not been revealed.
pub const SENTINEL: f64 = -1.0;
/// Policy-input value of a feature that was queried but is missing.
pub const QUERIED_MISSING: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "index")]
pub enum Action {
    Feature(usize),
    Diagnose(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub features: usize,
    pub diagnoses: usize,
}

impl ActionSpace {
    pub fn of(schema: &Schema) -> Self {
        Self {
            features: schema.n_features(),
            diagnoses: schema.n_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.features + self.diagnoses
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, action: Action) -> usize {
        match action {
            Action::Feature(j) => j,
            Action::Diagnose(c) => self.features + c,
        }
    }

    pub fn action(&self, index: usize) -> Result<Action> {
        if index < self.features {
            Ok(Action::Feature(index))
        } else if index < self.len() {
            Ok(Action::Diagnose(index - self.features))
        } else {
            Err(Error::Shape(format!("action index {index} outside 0..{}", self.len())))
        }
    }

    fn check(&self, action: Action) -> Result<()> {
        match action {
            Action::Feature(j) if j < self.features => Ok(()),
            Action::Diagnose(c) if c < self.diagnoses => Ok(()),
            other => Err(Error::Shape(format!("invalid action {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub use_case: UseCase,
    /// Scaling factor of the per-feature query penalty (lupus).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Penalty weight per feature in schema order (lupus).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_weights: Option<Vec<f64>>,
    /// Episode truncation limit (anemia).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl EnvConfig {
    /// Anemia with no query penalty and truncation at `m + 1` steps.
    pub fn anemia(schema: &Schema) -> Self {
        Self {
            use_case: UseCase::Anemia,
            lambda: None,
            penalty_weights: None,
            max_steps: Some(schema.n_features() + 1),
        }
    }

    pub fn lupus(lambda: f64, penalty_weights: Vec<f64>) -> Self {
        Self {
            use_case: UseCase::Lupus,
            lambda: Some(lambda),
            penalty_weights: Some(penalty_weights),
            max_steps: None,
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if schema.use_case != self.use_case {
            return Err(Error::config(format!(
                "{} environment configured for {} schema",
                self.use_case, schema.use_case
            )));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::config("lambda must be positive"));
            }
        }
        match (&self.penalty_weights, self.lambda) {
            (Some(w), Some(_)) => {
                if w.len() != schema.n_features() {
                    return Err(Error::config(format!(
                        "{} penalty weights for {} features",
                        w.len(),
                        schema.n_features()
                    )));
                }
                if w.iter().any(|c| !(*c > 0.0)) {
                    return Err(Error::config("penalty weights must be positive"));
                }
            }
            (None, None) => {}
            _ => return Err(Error::config("lambda and penalty weights go together")),
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be at least 1"));
        }
        Ok(())
    }

    /// Reward for a first-time feature query.
    fn query_reward(&self, feature: usize) -> f64 {
        match (&self.penalty_weights, self.lambda) {
            (Some(w), Some(l)) => -1.0 / (l * w[feature]),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
    pub queried: Vec<bool>,
}

impl Observation {
    fn fresh(m: usize) -> Self {
        Self {
            values: vec![SENTINEL; m],
            queried: vec![false; m],
        }
    }

    /// Policy input: the observation values, except that a queried feature
    /// whose value is missing reads [`QUERIED_MISSING`] rather than the
    /// sentinel, so the policy can tell a spent query from an open one.
    pub fn encoded(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.queried)
            .map(|(&v, &q)| if q && v == SENTINEL { QUERIED_MISSING } else { v })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub repeated_action: bool,
    pub diagnosis: Option<usize>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

/// One episode at a time over a single record.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    space: ActionSpace,
    record: Vec<Option<f64>>,
    label: usize,
    obs: Observation,
    steps: usize,
    terminal: bool,
}

impl Env {
    pub fn new(schema: &Schema, config: EnvConfig) -> Result<Self> {
        config.validate(schema)?;
        let space = ActionSpace::of(schema);
        Ok(Self {
            config,
            space,
            record: vec![None; space.features],
            label: 0,
            obs: Observation::fresh(space.features),
            steps: 0,
            // stepping before the first reset is a protocol error
            terminal: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_count(&self) -> ActionSpace {
        self.space
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn reset(&mut self, record: &PatientRecord) -> Result<&Observation> {
        if record.values.len() != self.space.features {
            return Err(Error::config(format!(
                "record has {} values, environment expects {}",
                record.values.len(),
                self.space.features
            )));
        }
        if record.label >= self.space.diagnoses {
            return Err(Error::config(format!("label {} out of range", record.label)));
        }
        self.record.clone_from(&record.values);
        self.label = record.label;
        self.obs = Observation::fresh(self.space.features);
        self.steps = 0;
        self.terminal = false;
        Ok(&self.obs)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        let value = match action {
            Action::Feature(j) if j < self.record.len() => self.record[j],
            _ => None,
        };
        self.step_with_value(action, value)
    }

    /// Like [`Env::step`], but a feature query reveals `value` instead of the
    /// record's value. Used when a person supplies the observations.
    pub fn step_with_value(&mut self, action: Action, value: Option<f64>) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::Protocol("step after terminal state".into()));
        }
        self.space.check(action)?;
        self.steps += 1;
        let mut info = StepInfo::default();
        let reward = match action {
            Action::Diagnose(c) => {
                info.diagnosis = Some(c);
                self.terminal = true;
                if c == self.label {
                    1.0
                } else {
                    -1.0
                }
            }
            Action::Feature(j) if self.obs.queried[j] => {
                info.repeated_action = true;
                self.terminal = true;
                -1.0
            }
            Action::Feature(j) => {
                self.obs.queried[j] = true;
                self.obs.values[j] = value.unwrap_or(SENTINEL);
                if self.config.max_steps.is_some_and(|limit| self.steps >= limit) {
                    info.truncated = true;
                    self.terminal = true;
                    0.0
                } else {
                    self.config.query_reward(j)
                }
            }
        };
        Ok(StepOutcome {
            observation: self.obs.clone(),
            reward,
            terminal: self.terminal,
            info,
        })
    }
}

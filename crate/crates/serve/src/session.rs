//! Interactive episodes: the policy suggests, a person supplies the values.

use std::time::Instant;

use serde::Serialize;

use pathrl_core::drl::GreedyAgent;
use pathrl_core::env::{Action, ActionSpace, Env};
use pathrl_core::synthgen::PatientRecord;
use pathrl_core::Error;

use crate::store::Policy;

pub const SESSION_SCHEMA: &str = "session/1";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session is {0}")]
    Inactive(&'static str),
    #[error("{0}")]
    OutOfRange(String),
    #[error(transparent)]
    Core(#[from] Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Diagnosed,
    Aborted,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Active => "active",
            Status::Diagnosed => "diagnosed",
            Status::Aborted => "aborted",
        }
    }
}

/// Why an aborted episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stop {
    Repeated,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionView {
    pub kind: &'static str,
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Entered {
    Value(f64),
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub action: ActionView,
    /// Omitted for diagnoses and repeated queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Entered>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: String,
    pub score: f64,
}

/// Wire form of a session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub schema: &'static str,
    pub session_id: String,
    pub policy_id: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<Stop>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<ActionView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<ActionView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_scores: Option<Vec<ClassScore>>,
    /// Current state: entered values, −1 where unknown.
    pub observation: Vec<f64>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub policy_id: String,
    env: Env,
    actions: Vec<Action>,
    entered: Vec<Option<Option<f64>>>,
    pending: Option<usize>,
    status: Status,
    stop: Option<Stop>,
    diagnosis: Option<usize>,
    scores: Option<Vec<f64>>,
    pub last_seen: Instant,
}

impl Session {
    /// Fresh all-missing observation, then the first greedy suggestion.
    pub fn start(id: String, policy: &Policy) -> Result<Self, SessionError> {
        let m = policy.schema.n_features();
        let mut env = Env::new(&policy.schema, policy.env.clone())?;
        env.reset(&PatientRecord::new(vec![None; m], 0))?;
        let mut s = Self {
            id,
            policy_id: policy.id.clone(),
            env,
            actions: Vec::new(),
            entered: Vec::new(),
            pending: None,
            status: Status::Active,
            stop: None,
            diagnosis: None,
            scores: None,
            last_seen: Instant::now(),
        };
        s.advance(policy)?;
        Ok(s)
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn diagnosis(&self) -> Option<usize> {
        self.diagnosis
    }

    /// The feature the policy is waiting on.
    pub fn pending(&self) -> Option<usize> {
        self.pending
    }

    /// Applies the entered value (`None` for missing) to the pending query.
    pub fn observe(&mut self, policy: &Policy, value: Option<f64>) -> Result<(), SessionError> {
        let j = match (self.status, self.pending) {
            (Status::Active, Some(j)) => j,
            (status, _) => return Err(SessionError::Inactive(status.as_str())),
        };
        if let Some(v) = value {
            let spec = &policy.schema.features[j];
            if !spec.in_range(v) {
                return Err(SessionError::OutOfRange(format!(
                    "{} = {v} is outside [{}, {}]",
                    spec.name, spec.range[0], spec.range[1]
                )));
            }
        }
        self.pending = None;
        if self.apply(Action::Feature(j), value, Some(value))? {
            return Ok(());
        }
        self.advance(policy)
    }

    /// Asks the policy for its next action. A new query waits for a value;
    /// anything else ends the episode immediately.
    fn advance(&mut self, policy: &Policy) -> Result<(), SessionError> {
        let agent = GreedyAgent::new(&policy.artifact.network, ActionSpace::of(&policy.schema))?;
        let decision = agent.decide(&self.env.observation().encoded())?;
        self.scores = decision.scores;
        match decision.action {
            Action::Feature(j) if !self.env.observation().queried[j] => {
                self.pending = Some(j);
            }
            action => {
                self.apply(action, None, None)?;
            }
        }
        Ok(())
    }

    /// Steps the environment; returns whether the episode ended.
    fn apply(
        &mut self,
        action: Action,
        value: Option<f64>,
        entered: Option<Option<f64>>,
    ) -> Result<bool, SessionError> {
        let out = self.env.step_with_value(action, value)?;
        self.actions.push(action);
        self.entered.push(entered);
        if out.terminal {
            self.diagnosis = out.info.diagnosis;
            (self.status, self.stop) = if out.info.truncated {
                (Status::Aborted, Some(Stop::Truncated))
            } else if out.info.repeated_action {
                (Status::Aborted, Some(Stop::Repeated))
            } else {
                (Status::Diagnosed, None)
            };
        }
        Ok(out.terminal)
    }

    pub fn view(&self, policy: &Policy) -> SessionView {
        let schema = &policy.schema;
        let action_view = |a: Action| match a {
            Action::Feature(j) => ActionView {
                kind: "feature",
                index: j,
                name: schema.features[j].name.clone(),
            },
            Action::Diagnose(c) => ActionView {
                kind: "diagnosis",
                index: c,
                name: schema.classes[c].clone(),
            },
        };
        let terminal = self.status != Status::Active;
        SessionView {
            schema: SESSION_SCHEMA,
            session_id: self.id.clone(),
            policy_id: self.policy_id.clone(),
            status: self.status,
            stop: self.stop,
            suggestion: self.pending.map(|j| action_view(Action::Feature(j))),
            diagnosis: self.diagnosis.map(|c| action_view(Action::Diagnose(c))),
            q_scores: self.scores.as_ref().filter(|_| terminal).map(|s| {
                s.iter()
                    .zip(&schema.classes)
                    .map(|(&score, class)| ClassScore {
                        class: class.clone(),
                        score,
                    })
                    .collect()
            }),
            observation: self.env.observation().values.clone(),
            history: self
                .actions
                .iter()
                .zip(&self.entered)
                .map(|(&a, e)| HistoryEntry {
                    action: action_view(a),
                    value: e.map(|v| v.map_or(Entered::Missing("missing"), Entered::Value)),
                })
                .collect(),
        }
    }
}

//! Agents and episode rollouts.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{Action, ActionSpace, Env, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::metrics::{Ending, EpisodeRecord};
use crate::qnet::{argmax, softmax, Network};
use crate::synthgen::{stream_rng, PatientRecord, Schema};

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Softmax over diagnostic-action values, if the agent has values.
    pub scores: Option<Vec<f64>>,
}

/// Maps observations to actions. `rng` is private to the current episode.
pub trait Agent: Sync {
    fn act(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Decision>;
}

/// Acts greedily on a Q-network.
#[derive(Debug, Clone, Copy)]
pub struct GreedyAgent<'a> {
    net: &'a Network,
    space: ActionSpace,
}

impl<'a> GreedyAgent<'a> {
    pub fn new(net: &'a Network, space: ActionSpace) -> Result<Self> {
        if net.inputs() != space.features || net.outputs() != space.len() {
            return Err(Error::Shape(format!(
                "network {}→{} does not fit {} features and {} actions",
                net.inputs(),
                net.outputs(),
                space.features,
                space.len()
            )));
        }
        Ok(Self { net, space })
    }

    /// Greedy decision for an encoded observation.
    pub fn decide(&self, values: &[f64]) -> Result<Decision> {
        let q = self.net.forward(values)?;
        Ok(Decision {
            action: self.space.action(argmax(&q))?,
            scores: Some(softmax(&q[self.space.features..])),
        })
    }
}

impl Agent for GreedyAgent<'_> {
    fn act(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        self.decide(&obs.encoded())
    }
}

/// Runs one episode to termination.
pub fn rollout(
    agent: &dyn Agent,
    env: &mut Env,
    record: &PatientRecord,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord> {
    let mut obs = env.reset(record)?.clone();
    let mut ep = EpisodeRecord {
        actions: Vec::new(),
        observed: Vec::new(),
        rewards: Vec::new(),
        ending: Ending::Diagnosed,
        prediction: None,
        truth: record.label,
        scores: None,
    };
    loop {
        let d = agent.act(&obs, rng)?;
        let out = env.step(d.action)?;
        ep.actions.push(d.action);
        ep.observed.push(match d.action {
            Action::Feature(j) if !out.info.repeated_action => record.get(j),
            _ => None,
        });
        ep.rewards.push(out.reward);
        if out.terminal {
            ep.scores = d.scores;
            ep.prediction = out.info.diagnosis;
            ep.ending = if out.info.truncated {
                Ending::Truncated
            } else if out.info.repeated_action {
                Ending::Repeated
            } else {
                Ending::Diagnosed
            };
            return Ok(ep);
        }
        obs = out.observation;
    }
}

/// One episode per record, in parallel. Episode `i` draws from its own seeded
/// stream, so results do not depend on scheduling.
pub fn evaluate_agent(
    agent: &dyn Agent,
    schema: &Schema,
    env_config: &EnvConfig,
    records: &[PatientRecord],
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let env = Env::new(schema, env_config.clone())?;
    records
        .par_iter()
        .enumerate()
        .map_init(
            || env.clone(),
            |env, (i, r)| rollout(agent, env, r, &mut stream_rng(seed, i as u64)),
        )
        .collect()
}

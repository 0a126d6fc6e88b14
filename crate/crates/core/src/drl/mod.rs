//! DQN-family training: ε-greedy interaction, replay, bootstrapped targets,
//! target-network syncing and periodic checkpoints.

pub mod replay;
pub mod rollout;
pub mod sumtree;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionSpace, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EpisodeRecord};
use crate::qnet::{argmax, Adam, Architecture, Head, Network, PolicyArtifact, TrainingMeta};
use crate::synthgen::{stream_rng, PatientRecord, Schema};

pub use replay::{Batch, PerParams, ReplayBuffer, Transition};
pub use rollout::{evaluate_agent, rollout, Agent, Decision, GreedyAgent};
pub use sumtree::SumTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dqn,
    Ddqn,
    Dueling,
    DuelingDdqn,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Dqn,
        Algorithm::Ddqn,
        Algorithm::Dueling,
        Algorithm::DuelingDdqn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::Ddqn => "ddqn",
            Algorithm::Dueling => "dueling",
            Algorithm::DuelingDdqn => "dueling-ddqn",
        }
    }

    pub fn double(self) -> bool {
        matches!(self, Algorithm::Ddqn | Algorithm::DuelingDdqn)
    }

    pub fn dueling(self) -> bool {
        matches!(self, Algorithm::Dueling | Algorithm::DuelingDdqn)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub buffer_size: usize,
    pub learning_rate: f64,
    pub target_update_interval: u64,
    pub learning_starts: u64,
    pub epsilon_initial: f64,
    pub epsilon_final: f64,
    /// Share of training over which ε decays linearly.
    pub exploration_fraction: f64,
    pub gamma: f64,
    pub train_frequency: u64,
    pub total_timesteps: u64,
    pub batch_size: usize,
    pub per_alpha: f64,
    pub per_beta_initial: f64,
    pub per_epsilon: f64,
    pub double: bool,
    pub dueling: bool,
    pub per: bool,
    pub hidden: Vec<usize>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Evenly spaced checkpoints in addition to the initial one.
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            buffer_size: 1_000_000,
            learning_rate: 1e-4,
            target_update_interval: 10_000,
            learning_starts: 50_000,
            epsilon_initial: 1.0,
            epsilon_final: 0.05,
            exploration_fraction: 0.1,
            gamma: 0.99,
            train_frequency: 4,
            total_timesteps: 300_000,
            batch_size: 32,
            per_alpha: 0.6,
            per_beta_initial: 0.4,
            per_epsilon: 1e-6,
            double: false,
            dueling: false,
            per: false,
            hidden: vec![64, 64],
            max_grad_norm: Some(10.0),
            checkpoints: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_algorithm(algorithm: Algorithm, per: bool) -> Self {
        Self {
            double: algorithm.double(),
            dueling: algorithm.dueling(),
            per,
            ..Self::default()
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match (self.dueling, self.double) {
            (false, false) => Algorithm::Dqn,
            (false, true) => Algorithm::Ddqn,
            (true, false) => Algorithm::Dueling,
            (true, true) => Algorithm::DuelingDdqn,
        }
    }

    /// Algorithm name with a `-per` suffix when prioritized replay is on.
    pub fn label(&self) -> String {
        let mut s = self.algorithm().as_str().to_owned();
        if self.per {
            s.push_str("-per");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        for (name, v) in [
            ("epsilon_final", self.epsilon_final),
            ("epsilon_initial", self.epsilon_initial),
            ("exploration_fraction", self.exploration_fraction),
            ("per_beta_initial", self.per_beta_initial),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.buffer_size == 0 || self.batch_size == 0 {
            return fail("buffer and batch sizes must be positive");
        }
        if self.train_frequency == 0 || self.target_update_interval == 0 {
            return fail("train frequency and target update interval must be positive");
        }
        if !(self.learning_rate > 0.0) || self.per_alpha < 0.0 || !(self.per_epsilon > 0.0) {
            return fail("learning rate and PER ε must be positive, PER α non-negative");
        }
        if self.checkpoints == 0 {
            return fail("at least one checkpoint is required");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_initial` to `epsilon_final`.
    pub fn epsilon(&self, t: u64) -> f64 {
        let horizon = self.exploration_fraction * self.total_timesteps as f64;
        if horizon <= 0.0 || t as f64 >= horizon {
            return self.epsilon_final;
        }
        let f = t as f64 / horizon;
        self.epsilon_initial + f * (self.epsilon_final - self.epsilon_initial)
    }

    /// PER importance exponent annealed linearly to 1.
    pub fn beta(&self, t: u64) -> f64 {
        if self.total_timesteps == 0 {
            return 1.0;
        }
        let f = (t as f64 / self.total_timesteps as f64).min(1.0);
        self.per_beta_initial + f * (1.0 - self.per_beta_initial)
    }

    /// Steps at which checkpoints are taken, always including 0.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut steps = vec![0];
        if self.total_timesteps > 0 {
            let k = self.checkpoints as u64;
            for i in 1..=k {
                let s = self.total_timesteps * i / k;
                if s > *steps.last().expect("non-empty") {
                    steps.push(s);
                }
            }
        }
        steps
    }
}

/// Input divisors: the largest magnitude of each feature's declared range.
pub fn input_scale(schema: &Schema) -> Vec<f64> {
    schema
        .features
        .iter()
        .map(|f| f.range[0].abs().max(f.range[1].abs()).max(1.0))
        .collect()
}

/// Weights for pathway scores: the query penalties when configured.
pub fn pathway_weights(config: &EnvConfig) -> Option<&[f64]> {
    config.penalty_weights.as_deref()
}

/// Bootstrapped targets for flat batches.
#[allow(clippy::too_many_arguments)]
pub fn td_targets(
    rewards: &[f64],
    next_states: &[f64],
    terminals: &[bool],
    policy: &Network,
    target: &Network,
    gamma: f64,
    double: bool,
) -> Result<Vec<f64>> {
    let batch = rewards.len();
    let n = target.outputs();
    let q_next = target.forward_batch(next_states, batch)?;
    let q_choice = if double {
        Some(policy.forward_batch(next_states, batch)?)
    } else {
        None
    };
    Ok((0..batch)
        .map(|b| {
            if terminals[b] {
                return rewards[b];
            }
            let row = &q_next[b * n..(b + 1) * n];
            let bootstrap = match &q_choice {
                Some(q) => row[argmax(&q[b * n..(b + 1) * n])],
                None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            rewards[b] + gamma * bootstrap
        })
        .collect())
}

/// `r` for terminal transitions; otherwise `r + γ·max_a Q⁻(s′, a)` or, with
/// `double`, `r + γ·Q⁻(s′, argmax_a Q(s′, a))`.
pub fn td_target(
    batch: &[Transition],
    policy: &Network,
    target: &Network,
    gamma: f64,
    double: bool,
) -> Result<Vec<f64>> {
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let next: Vec<f64> = batch.iter().flat_map(|t| t.next_state.iter().copied()).collect();
    let terminals: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
    td_targets(&rewards, &next, &terminals, policy, target, gamma, double)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub timestep: u64,
    pub artifact: PolicyArtifact,
    pub validation_accuracy: f64,
    pub validation_wpahm: Option<f64>,
    pub validation_mean_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    BestAccuracy,
    BestWpahm,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "best_accuracy" => Ok(Selection::BestAccuracy),
            "wpahm" | "best_wpahm" => Ok(Selection::BestWpahm),
            other => Err(Error::config(format!("unknown selection `{other}`"))),
        }
    }
}

/// Index of the best checkpoint under `strategy`; the earliest wins ties.
pub fn select_checkpoint(checkpoints: &[Checkpoint], strategy: Selection) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to select from".into()));
    }
    let score = |c: &Checkpoint| -> Result<f64> {
        match strategy {
            Selection::BestAccuracy => Ok(c.validation_accuracy),
            Selection::BestWpahm => c
                .validation_wpahm
                .ok_or_else(|| Error::config("wPAHM is undefined without query penalties")),
        }
    };
    let mut best = 0;
    let mut best_score = score(&checkpoints[0])?;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        let s = score(c)?;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub gradient_steps: u64,
    /// Environment step count at the first gradient update.
    pub first_gradient_step: Option<u64>,
    pub target_syncs: u64,
    pub episodes: u64,
}

struct Validator<'a> {
    schema: &'a Schema,
    env: &'a EnvConfig,
    records: &'a [PatientRecord],
}

impl Validator<'_> {
    fn checkpoint(&self, net: &Network, cfg: &TrainConfig, timestep: u64) -> Result<Checkpoint> {
        let meta = TrainingMeta {
            algorithm: cfg.label(),
            seed: cfg.seed,
            timestep,
            total_timesteps: cfg.total_timesteps,
            ..Default::default()
        };
        let mut artifact = PolicyArtifact::new(net.clone(), self.schema, self.env.lambda, self.env.max_steps, meta);
        let episodes = evaluate_policy(&artifact, self.schema, self.env, self.records)?;
        let acc = metrics::accuracy(&episodes);
        let wpahm = pathway_weights(self.env)
            .and_then(|w| metrics::aps(&episodes, w).ok())
            .map(|s| metrics::wpahm(acc, s));
        let length = metrics::mean_episode_length(&episodes);
        artifact.header.training.validation_accuracy = Some(acc);
        artifact.header.training.validation_wpahm = wpahm;
        Ok(Checkpoint {
            timestep,
            artifact,
            validation_accuracy: acc,
            validation_wpahm: wpahm,
            validation_mean_length: length,
        })
    }
}

/// Trains one agent. Episodes start from training records drawn uniformly
/// with replacement; checkpoints are scored on `validation`.
pub fn train(
    schema: &Schema,
    env_config: &EnvConfig,
    cfg: &TrainConfig,
    train_records: &[PatientRecord],
    validation: &[PatientRecord],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_records.is_empty() {
        return Err(Error::Empty("no training records".into()));
    }
    let mut env = Env::new(schema, env_config.clone())?;
    let space = ActionSpace::of(schema);
    let m = schema.n_features();
    let mut arch = Architecture::new(m, space.len(), if cfg.dueling { Head::Dueling } else { Head::Plain });
    arch.hidden.clone_from(&cfg.hidden);
    arch.input_scale = Some(input_scale(schema));
    let mut policy = Network::new(arch, cfg.seed)?;
    let mut target = policy.clone();
    let mut opt = Adam::new(&policy, cfg.learning_rate);
    let capacity = cfg.buffer_size.min(cfg.total_timesteps.max(1) as usize);
    let mut buffer = if cfg.per {
        ReplayBuffer::prioritized(
            capacity,
            m,
            PerParams {
                alpha: cfg.per_alpha,
                epsilon: cfg.per_epsilon,
            },
        )
    } else {
        ReplayBuffer::uniform(capacity, m)
    };
    let validator = Validator {
        schema,
        env: env_config,
        records: validation,
    };
    let ckpt_steps = cfg.checkpoint_steps();
    let mut next_ckpt = 1;
    let mut checkpoints = vec![validator.checkpoint(&policy, cfg, 0)?];

    let mut rng = stream_rng(cfg.seed, 0x64);
    let mut outcome = TrainOutcome {
        checkpoints: Vec::new(),
        gradient_steps: 0,
        first_gradient_step: None,
        target_syncs: 0,
        episodes: 0,
    };
    let n_actions = space.len();
    let mut state = env
        .reset(&train_records[rng.random_range(0..train_records.len())])?
        .encoded();
    for t in 1..=cfg.total_timesteps {
        let a = if rng.random::<f64>() < cfg.epsilon(t - 1) {
            rng.random_range(0..n_actions)
        } else {
            argmax(&policy.forward(&state)?)
        };
        let out = env.step(space.action(a)?)?;
        buffer.push(&Transition {
            state: std::mem::take(&mut state),
            action: a,
            reward: out.reward,
            next_state: out.observation.encoded(),
            terminal: out.terminal,
        });
        state = if out.terminal {
            outcome.episodes += 1;
            env.reset(&train_records[rng.random_range(0..train_records.len())])?
                .encoded()
        } else {
            out.observation.encoded()
        };

        if t > cfg.learning_starts && t % cfg.train_frequency == 0 {
            gradient_step(cfg, t, &mut rng, &buffer, &policy, &target).and_then(|(grads, td, indices)| {
                opt.step(&mut policy, &grads)?;
                buffer.update_priorities(&indices, &td);
                Ok(())
            })?;
            outcome.gradient_steps += 1;
            outcome.first_gradient_step.get_or_insert(t);
        }
        if t % cfg.target_update_interval == 0 {
            target.copy_from(&policy)?;
            outcome.target_syncs += 1;
        }
        if next_ckpt < ckpt_steps.len() && t == ckpt_steps[next_ckpt] {
            checkpoints.push(validator.checkpoint(&policy, cfg, t)?);
            next_ckpt += 1;
        }
    }
    outcome.checkpoints = checkpoints;
    Ok(outcome)
}

type StepResult = (crate::qnet::Gradients, Vec<f64>, Vec<usize>);

fn gradient_step(
    cfg: &TrainConfig,
    t: u64,
    rng: &mut impl Rng,
    buffer: &ReplayBuffer,
    policy: &Network,
    target: &Network,
) -> Result<StepResult> {
    let batch = buffer.sample(rng, cfg.batch_size, cfg.beta(t))?;
    let y = td_targets(
        &batch.rewards,
        &batch.next_states,
        &batch.terminals,
        policy,
        target,
        cfg.gamma,
        cfg.double,
    )?;
    let n = policy.outputs();
    let bs = batch.len();
    let mut td = vec![0.0; bs];
    // loss = mean_b w_b · (Q(s_b, a_b) − y_b)² / 2
    let (_, mut grads) = policy.forward_backward(&batch.states, bs, |q| {
        let mut dq = vec![0.0; bs * n];
        for b in 0..bs {
            let i = b * n + batch.actions[b];
            td[b] = q[i] - y[b];
            dq[i] = batch.weights[b] * td[b];
        }
        dq
    })?;
    if let Some(max) = cfg.max_grad_norm {
        grads.clip_norm(max);
    }
    Ok((grads, td, batch.indices))
}

/// Greedy rollouts of a trained policy, one episode per record.
pub fn evaluate_policy(
    artifact: &PolicyArtifact,
    schema: &Schema,
    env_config: &EnvConfig,
    records: &[PatientRecord],
) -> Result<Vec<EpisodeRecord>> {
    artifact.check_schema(schema)?;
    let agent = GreedyAgent::new(&artifact.network, ActionSpace::of(schema))?;
    evaluate_agent(&agent, schema, env_config, records, 0)
}

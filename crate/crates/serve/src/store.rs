//! Policies found in an artifact directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use pathrl_core::env::EnvConfig;
use pathrl_core::qnet::PolicyArtifact;
use pathrl_core::synthgen::{defaults, Schema, UseCase};
use pathrl_core::{Error, Result};

pub const POLICY_EXT: &str = "policy";
pub const EPISODES_SUFFIX: &str = ".episodes.json";

/// A loaded policy, its schema and the environment it was trained in.
#[derive(Debug, Clone)]
pub struct Policy {
    pub id: String,
    pub artifact: PolicyArtifact,
    pub schema: Schema,
    pub env: EnvConfig,
    /// Precomputed episodes for pathway graphs, if present.
    pub episodes: Option<PathBuf>,
}

impl Policy {
    pub fn from_artifact(id: String, artifact: PolicyArtifact, episodes: Option<PathBuf>) -> Result<Self> {
        let schema = defaults::schema(artifact.header.use_case);
        artifact.check_schema(&schema)?;
        let env = match artifact.header.use_case {
            UseCase::Anemia => EnvConfig {
                max_steps: artifact.header.max_steps,
                ..EnvConfig::anemia(&schema)
            },
            UseCase::Lupus => {
                let lambda = artifact
                    .header
                    .lambda
                    .ok_or_else(|| Error::Config("lupus artifact without λ".into()))?;
                EnvConfig::lupus(lambda, defaults::penalty_table().weights_for(&schema)?)
            }
        };
        Ok(Self {
            id,
            artifact,
            schema,
            env,
            episodes,
        })
    }

    pub fn info(&self) -> PolicyInfo {
        let h = &self.artifact.header;
        PolicyInfo {
            policy_id: self.id.clone(),
            use_case: h.use_case,
            algorithm: h.training.algorithm.clone(),
            seed: h.training.seed,
            timestep: h.training.timestep,
            validation_accuracy: h.training.validation_accuracy,
            lambda: h.lambda,
            feature_names: h.feature_names.clone(),
            class_names: h.class_names.clone(),
            has_pathways: self.episodes.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyInfo {
    pub policy_id: String,
    pub use_case: UseCase,
    pub algorithm: String,
    pub seed: u64,
    pub timestep: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub has_pathways: bool,
}

/// Read-only set of policies keyed by file stem.
#[derive(Debug, Clone, Default)]
pub struct Store {
    policies: BTreeMap<String, Policy>,
}

impl Store {
    /// Loads every `<id>.policy` in `dir`; `<id>.episodes.json` beside it
    /// backs the pathway graph. Unreadable artifacts are skipped with a warning.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == POLICY_EXT))
            .collect();
        paths.sort();
        let mut store = Self::default();
        for path in paths {
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            let episodes = dir.join(format!("{id}{EPISODES_SUFFIX}"));
            let loaded = PolicyArtifact::load(&path)
                .and_then(|a| Policy::from_artifact(id.clone(), a, episodes.is_file().then_some(episodes)));
            match loaded {
                Ok(p) => store.insert(p),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, policy: Policy) {
        self.policies.insert(policy.id.clone(), policy);
    }

    pub fn get(&self, id: &str) -> Option<&Policy> {
        self.policies.get(id)
    }

    pub fn list(&self) -> Vec<PolicyInfo> {
        self.policies.values().map(Policy::info).collect()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

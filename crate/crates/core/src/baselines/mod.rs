//! Comparison agents and classifiers: a uniform random agent, an agent that
//! follows the dataset's labeling tree, a CART tree, a feed-forward network
//! and a 1-nearest-neighbor imputer.

pub mod cart;
pub mod ffnn;
pub mod knn;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::drl::{Agent, Decision};
use crate::env::{Action, ActionSpace, Observation, SENTINEL};
use crate::error::{Error, Result};
use crate::synthgen::tree::Walk;
use crate::synthgen::{DecisionTree, Schema, UseCase};

pub use cart::{CartParams, TreeClassifier};
pub use ffnn::{FfnnClassifier, FfnnParams};
pub use knn::{knn_impute, Imputation};

/// Picks every action uniformly at random, independently at each step.
#[derive(Debug, Clone, Copy)]
pub struct RandomAgent {
    space: ActionSpace,
}

impl RandomAgent {
    pub fn new(schema: &Schema) -> Self {
        Self {
            space: ActionSpace::of(schema),
        }
    }
}

impl Agent for RandomAgent {
    fn act(&self, _obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision {
            action: self.space.action(rng.random_range(0..self.space.len()))?,
            scores: None,
        })
    }
}

/// Follows the labeling tree over the values observed so far.
#[derive(Debug, Clone)]
pub struct TreeAgent {
    tree: DecisionTree,
}

impl TreeAgent {
    pub fn new(schema: &Schema, tree: DecisionTree) -> Result<Self> {
        if schema.use_case != UseCase::Anemia {
            return Err(Error::Unsupported(format!(
                "the tree agent needs a labeling tree; {} has none",
                schema.use_case
            )));
        }
        Ok(Self { tree })
    }

    /// Next action: the first unobserved feature on the path, the leaf's
    /// diagnosis, or the inconclusive class if the path needs a missing value.
    pub fn decide(&self, obs: &Observation) -> Action {
        let walk = self
            .tree
            .walk_with(|j| (obs.queried[j] && obs.values[j] != SENTINEL).then_some(obs.values[j]));
        match walk {
            Walk::Leaf(c) => Action::Diagnose(c),
            Walk::Missing(j) if obs.queried[j] => Action::Diagnose(self.tree.inconclusive_class()),
            Walk::Missing(j) => Action::Feature(j),
        }
    }
}

impl Agent for TreeAgent {
    fn act(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision {
            action: self.decide(obs),
            scores: None,
        })
    }
}

/// Missing-value encoding shared by the classifiers.
pub const MISSING: f64 = SENTINEL;

/// Classifier input: feature values with missing entries as [`MISSING`].
pub fn encode_record(values: &[Option<f64>]) -> Vec<f64> {
    values.iter().map(|v| v.unwrap_or(MISSING)).collect()
}

//! Training-set degradation: missing values, anemia feature noise and lupus
//! label noise.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schema::{PatientRecord, Schema, UseCase};
use super::stream_rng;
use super::tree::{DecisionTree, INCONCLUSIVE};
use crate::error::{Error, Result};

pub const NO_ANEMIA: &str = "No anemia";
/// Share of anemic records relabeled as not anemic whenever anemia noise is applied.
pub const RELABEL_FRACTION: f64 = 0.10;
/// Default σ as a fraction of the branch threshold.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    Missingness,
    AnemiaNoise,
    LupusLabelNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: f64,
    pub protected_features: Vec<String>,
    #[serde(default)]
    pub noise_sigmas: BTreeMap<String, f64>,
    pub seed: u64,
}

pub fn default_protected(use_case: UseCase) -> Vec<String> {
    match use_case {
        UseCase::Anemia => vec!["hemoglobin".into(), "gender".into()],
        UseCase::Lupus => vec!["ana".into()],
    }
}

impl DegradationSpec {
    pub fn missingness(use_case: UseCase, level: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::Missingness,
            level,
            protected_features: default_protected(use_case),
            noise_sigmas: BTreeMap::new(),
            seed,
        }
    }

    pub fn anemia_noise(level: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::AnemiaNoise,
            level,
            protected_features: default_protected(UseCase::Anemia),
            noise_sigmas: BTreeMap::from([("ret_count".into(), 0.2), ("mcv".into(), 2.0)]),
            seed,
        }
    }

    pub fn lupus_label_noise(level: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::LupusLabelNoise,
            level,
            protected_features: default_protected(UseCase::Lupus),
            noise_sigmas: BTreeMap::new(),
            seed,
        }
    }

    fn validate(&self, schema: &Schema) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::config(format!(
                "degradation level {} outside [0, 1]",
                self.level
            )));
        }
        let expected = match self.kind {
            DegradationKind::Missingness => schema.use_case,
            DegradationKind::AnemiaNoise => UseCase::Anemia,
            DegradationKind::LupusLabelNoise => UseCase::Lupus,
        };
        if schema.use_case != expected {
            return Err(Error::config(format!(
                "{:?} degradation does not apply to {} data",
                self.kind, schema.use_case
            )));
        }
        for (f, s) in &self.noise_sigmas {
            schema.require_feature(f)?;
            if !(*s > 0.0) {
                return Err(Error::config(format!("noise σ for `{f}` must be positive")));
            }
        }
        self.protected_features
            .iter()
            .map(|p| schema.require_feature(p))
            .collect()
    }
}

fn count(level: f64, n: usize) -> usize {
    (level * n as f64).floor() as usize
}

/// Applies `spec` to a copy of `records`. Anemia noise needs the labeling tree
/// for branch thresholds; the other kinds ignore `tree`.
pub fn degrade(
    records: &[PatientRecord],
    schema: &Schema,
    tree: Option<&DecisionTree>,
    spec: &DegradationSpec,
) -> Result<Vec<PatientRecord>> {
    let protected = spec.validate(schema)?;
    let mut out = records.to_vec();
    match spec.kind {
        DegradationKind::Missingness => {
            let mut rng = stream_rng(spec.seed, 0x6d);
            for j in (0..schema.n_features()).filter(|j| !protected.contains(j)) {
                let present: Vec<usize> = (0..out.len()).filter(|&i| out[i].values[j].is_some()).collect();
                for pick in sample(&mut rng, present.len(), count(spec.level, present.len())) {
                    out[present[pick]].values[j] = None;
                }
            }
        }
        DegradationKind::LupusLabelNoise => {
            if schema.n_classes() != 2 {
                return Err(Error::config("label flipping needs exactly two classes"));
            }
            let mut rng = stream_rng(spec.seed, 0x6c);
            for i in sample(&mut rng, out.len(), count(spec.level, out.len())) {
                out[i].label = 1 - out[i].label;
            }
        }
        DegradationKind::AnemiaNoise => {
            let tree = tree.ok_or_else(|| Error::config("anemia noise needs the labeling tree"))?;
            anemia_noise(&mut out, schema, tree, spec, &protected)?;
        }
    }
    Ok(out)
}

fn anemia_noise(
    out: &mut [PatientRecord],
    schema: &Schema,
    tree: &DecisionTree,
    spec: &DegradationSpec,
    protected: &[usize],
) -> Result<()> {
    let no_anemia = schema.require_class(NO_ANEMIA)?;
    let inconclusive = schema.require_class(INCONCLUSIVE)?;
    let branches = tree.branch_thresholds();
    let mut rng = stream_rng(spec.seed, 0x6e);
    for (&class, features) in &branches {
        if class == no_anemia || class == inconclusive {
            continue;
        }
        let members: Vec<usize> = (0..out.len()).filter(|&i| out[i].label == class).collect();
        let budget = count(spec.level, members.len());
        for (&j, thresholds) in features {
            if protected.contains(&j) || thresholds.is_empty() {
                continue;
            }
            let name = &schema.features[j].name;
            let present: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| out[i].values[j].is_some())
                .collect();
            let k = budget.min(present.len());
            let picks: Vec<usize> = sample(&mut rng, present.len(), k).into_vec();
            let t: Vec<f64> = thresholds.iter().map(|t| t.0).collect();
            // split the picks evenly across thresholds, earlier thresholds
            // taking the remainder
            let mut start = 0;
            for (ti, &threshold) in t.iter().enumerate() {
                let share = k / t.len() + usize::from(ti < k % t.len());
                let sigma = spec
                    .noise_sigmas
                    .get(name)
                    .copied()
                    .unwrap_or(DEFAULT_SIGMA_FRACTION * threshold.abs());
                let normal =
                    Normal::new(threshold, sigma).map_err(|e| Error::config(format!("noise for `{name}`: {e}")))?;
                for &p in &picks[start..start + share] {
                    out[present[p]].values[j] = Some(normal.sample(&mut rng));
                }
                start += share;
            }
        }
    }
    let anemic: Vec<usize> = (0..out.len())
        .filter(|&i| out[i].label != no_anemia && out[i].label != inconclusive)
        .collect();
    for pick in sample(&mut rng, anemic.len(), count(RELABEL_FRACTION, anemic.len())) {
        out[anemic[pick]].label = no_anemia;
    }
    Ok(())
}

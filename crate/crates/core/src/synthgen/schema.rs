//! Feature schemas, patient records and the class set of each use case.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The two diagnostic problems shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseCase {
    Anemia,
    Lupus,
}

impl UseCase {
    pub fn as_str(self) -> &'static str {
        match self {
            UseCase::Anemia => "anemia",
            UseCase::Lupus => "lupus",
        }
    }
}

impl fmt::Display for UseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UseCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anemia" => Ok(UseCase::Anemia),
            "lupus" => Ok(UseCase::Lupus),
            other => Err(Error::config(format!("unknown use case `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
    Categorical { levels: usize },
}

impl FeatureKind {
    /// Number of discrete levels, if the feature is discrete.
    pub fn levels(&self) -> Option<usize> {
        match self {
            FeatureKind::Continuous => None,
            FeatureKind::Binary => Some(2),
            FeatureKind::Categorical { levels } => Some(*levels),
        }
    }
}

/// A class-conditional value distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDist {
    Uniform([f64; 2]),
    Constant(f64),
    /// Probability of each level `0..n`.
    Categorical(Vec<f64>),
}

impl ValueDist {
    fn validate(&self, feature: &str) -> Result<()> {
        match self {
            ValueDist::Uniform([lo, hi]) => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::config(format!(
                        "feature `{feature}`: uniform range [{lo}, {hi}] must have min < max"
                    )));
                }
            }
            ValueDist::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::config(format!("feature `{feature}`: constant must be finite")));
                }
            }
            ValueDist::Categorical(p) => check_distribution(feature, p)?,
        }
        Ok(())
    }
}

pub(crate) fn check_distribution(feature: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::config(format!("feature `{feature}`: empty distribution")));
    }
    if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::config(format!(
            "feature `{feature}`: probability {bad} outside [0, 1]"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "feature `{feature}`: probabilities sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// How a feature is drawn during generation: a default distribution with
/// optional per-class overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub default: ValueDist,
    #[serde(default)]
    pub per_class: BTreeMap<String, ValueDist>,
}

impl Generation {
    pub fn for_class(&self, class: &str) -> &ValueDist {
        self.per_class.get(class).unwrap_or(&self.default)
    }
}

/// Deterministic formula computing a feature from other, non-derived features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Derivation {
    /// `factor * input`
    Product { factor: f64, input: String },
    /// `factor * numerator / denominator`
    Ratio {
        factor: f64,
        numerator: String,
        denominator: String,
    },
}

impl Derivation {
    pub fn inputs(&self) -> Vec<&str> {
        match self {
            Derivation::Product { input, .. } => vec![input.as_str()],
            Derivation::Ratio {
                numerator, denominator, ..
            } => vec![numerator.as_str(), denominator.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default)]
    pub unit: String,
    /// Plausible value range; values entered interactively must fall inside it.
    pub range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<Generation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derivation>,
}

impl FeatureSpec {
    pub fn in_range(&self, value: f64) -> bool {
        value.is_finite() && value >= self.range[0] && value <= self.range[1]
    }
}

/// The ordered feature set and class set of one use case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub use_case: UseCase,
    pub classes: Vec<String>,
    pub features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::config("schema has no features"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("schema has no classes"));
        }
        let mut seen = BTreeMap::new();
        for (i, f) in self.features.iter().enumerate() {
            if seen.insert(f.name.as_str(), i).is_some() {
                return Err(Error::config(format!("duplicate feature `{}`", f.name)));
            }
            if !(f.range[0] <= f.range[1]) {
                return Err(Error::config(format!("feature `{}`: bad range", f.name)));
            }
        }
        for f in &self.features {
            match (&f.generation, &f.derived) {
                (Some(gen), None) => {
                    gen.default.validate(&f.name)?;
                    for (class, dist) in &gen.per_class {
                        if !self.classes.contains(class) {
                            return Err(Error::config(format!("feature `{}`: unknown class `{class}`", f.name)));
                        }
                        dist.validate(&f.name)?;
                    }
                }
                (None, Some(derivation)) => {
                    for input in derivation.inputs() {
                        let Some(&j) = seen.get(input) else {
                            return Err(Error::config(format!(
                                "feature `{}` derives from unknown feature `{input}`",
                                f.name
                            )));
                        };
                        if self.features[j].derived.is_some() {
                            return Err(Error::config(format!(
                                "feature `{}` derives from derived feature `{input}`",
                                f.name
                            )));
                        }
                    }
                }
                (None, None) => {}
                (Some(_), Some(_)) => {
                    return Err(Error::config(format!(
                        "feature `{}` is both generated and derived",
                        f.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn require_feature(&self, name: &str) -> Result<usize> {
        self.feature_index(name)
            .ok_or_else(|| Error::config(format!("feature `{name}` not in {} schema", self.use_case)))
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn require_class(&self, label: &str) -> Result<usize> {
        self.class_index(label)
            .ok_or_else(|| Error::config(format!("class `{label}` not in {} schema", self.use_case)))
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Stable hash of the feature and class lists, used to tie artifacts to a schema.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.use_case.as_str().as_bytes());
        for f in &self.features {
            h.update([0u8]);
            h.update(f.name.as_bytes());
        }
        for c in &self.classes {
            h.update([1u8]);
            h.update(c.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One synthetic patient. `values` is indexed by schema feature order;
/// `None` marks a missing value. `label` indexes `Schema::classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub values: Vec<Option<f64>>,
    pub label: usize,
}

impl PatientRecord {
    pub fn new(values: Vec<Option<f64>>, label: usize) -> Self {
        Self { values, label }
    }

    pub fn get(&self, feature: usize) -> Option<f64> {
        self.values.get(feature).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        if self.values.len() != schema.n_features() {
            return Err(Error::config(format!(
                "record has {} values, schema has {} features",
                self.values.len(),
                schema.n_features()
            )));
        }
        if self.label >= schema.n_classes() {
            return Err(Error::config(format!("label index {} out of range", self.label)));
        }
        Ok(())
    }
}

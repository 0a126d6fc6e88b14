//! Per-feature acquisition cost used by the lupus reward and pathway score.

use serde::{Deserialize, Serialize};

use super::schema::Schema;
use crate::error::{Error, Result};

const RATING_MAX: f64 = 5.0;

/// `c = 2·invasiveness + 0.5·turnaround + 0.5·financial`, each rating in `[0, 5]`.
pub fn compute_penalty_weight(invasiveness: f64, turnaround: f64, financial: f64) -> Result<f64> {
    for (name, r) in [
        ("invasiveness", invasiveness),
        ("turnaround", turnaround),
        ("financial", financial),
    ] {
        if !(0.0..=RATING_MAX).contains(&r) {
            return Err(Error::config(format!("{name} rating {r} outside [0, 5]")));
        }
    }
    Ok(2.0 * invasiveness + 0.5 * turnaround + 0.5 * financial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyEntry {
    pub feature: String,
    pub invasiveness: f64,
    pub turnaround: f64,
    pub financial: f64,
}

impl PenaltyEntry {
    pub fn weight(&self) -> Result<f64> {
        compute_penalty_weight(self.invasiveness, self.turnaround, self.financial)
            .map_err(|e| Error::config(format!("feature `{}`: {e}", self.feature)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeightTable {
    pub features: Vec<PenaltyEntry>,
}

impl PenaltyWeightTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        for e in &table.features {
            let c = e.weight()?;
            if c <= 0.0 {
                return Err(Error::config(format!(
                    "feature `{}`: penalty weight must be positive",
                    e.feature
                )));
            }
        }
        Ok(table)
    }

    pub fn weight(&self, feature: &str) -> Option<f64> {
        self.features
            .iter()
            .find(|e| e.feature == feature)
            .and_then(|e| e.weight().ok())
    }

    /// Weights in schema feature order; every schema feature must be rated.
    pub fn weights_for(&self, schema: &Schema) -> Result<Vec<f64>> {
        schema
            .feature_names()
            .map(|name| {
                self.weight(name)
                    .ok_or_else(|| Error::config(format!("no penalty rating for feature `{name}`")))
            })
            .collect()
    }
}

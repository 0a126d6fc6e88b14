//! Lupus: weighted classification criteria and prevalence-driven generation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schema::{check_distribution, PatientRecord, Schema};
use super::{draw_level, stream_rng};
use crate::error::{Error, Result};

pub const NO_LUPUS: &str = "No lupus";
pub const LUPUS: &str = "Lupus";

/// Weighted criteria: a category contributes the largest weight among its
/// positive features, and a record is lupus when the entry feature is positive
/// and the total reaches `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LupusCriteria {
    pub entry_feature: String,
    pub threshold: f64,
    /// category → feature → level (as text) → weight
    pub categories: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledCategory {
    /// (feature index, level, weight)
    items: Vec<(usize, i64, f64)>,
}

/// Criteria resolved against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct LupusScorer {
    entry: usize,
    threshold: f64,
    categories: Vec<CompiledCategory>,
    no_lupus: usize,
    lupus: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LupusScore {
    pub score: f64,
    pub label: usize,
}

impl LupusCriteria {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config("lupus threshold must be positive"));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (cat, features) in &self.categories {
            for (feature, levels) in features {
                if let Some(prev) = owner.insert(feature, cat) {
                    return Err(Error::config(format!(
                        "feature `{feature}` appears in categories `{prev}` and `{cat}`"
                    )));
                }
                for (level, w) in levels {
                    if level.parse::<i64>().is_err() {
                        return Err(Error::config(format!(
                            "feature `{feature}`: level key `{level}` is not an integer"
                        )));
                    }
                    if !(*w > 0.0) {
                        return Err(Error::config(format!(
                            "feature `{feature}`: criteria weight {w} must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        self.compile(schema).map(|_| ())
    }

    /// Weight of `feature` at `level`, if it is a criterion.
    pub fn weight(&self, feature: &str, level: i64) -> Option<f64> {
        self.categories
            .values()
            .find_map(|f| f.get(feature))
            .and_then(|levels| levels.get(&level.to_string()).copied())
    }

    pub fn compile(&self, schema: &Schema) -> Result<LupusScorer> {
        self.validate()?;
        let mut categories = Vec::with_capacity(self.categories.len());
        for features in self.categories.values() {
            let mut items = Vec::new();
            for (feature, levels) in features {
                let j = schema.require_feature(feature)?;
                for (level, w) in levels {
                    items.push((j, level.parse::<i64>().expect("validated"), *w));
                }
            }
            categories.push(CompiledCategory { items });
        }
        Ok(LupusScorer {
            entry: schema.require_feature(&self.entry_feature)?,
            threshold: self.threshold,
            categories,
            no_lupus: schema.require_class(NO_LUPUS)?,
            lupus: schema.require_class(LUPUS)?,
        })
    }
}

impl LupusScorer {
    pub fn lupus_class(&self) -> usize {
        self.lupus
    }

    pub fn no_lupus_class(&self) -> usize {
        self.no_lupus
    }
}

/// Scores a record. Missing features count as absent; without a positive entry
/// feature the label is always no lupus.
pub fn score_lupus(record: &PatientRecord, scorer: &LupusScorer) -> LupusScore {
    let level = |j: usize| record.get(j).map(|v| v.round() as i64).unwrap_or(0);
    let score: f64 = scorer
        .categories
        .iter()
        .map(|cat| {
            cat.items
                .iter()
                .filter(|(j, l, _)| level(*j) == *l)
                .map(|(_, _, w)| *w)
                .fold(0.0, f64::max)
        })
        .sum();
    let positive = level(scorer.entry) == 1;
    let label = if positive && score >= scorer.threshold {
        scorer.lupus
    } else {
        scorer.no_lupus
    };
    LupusScore { score, label }
}

/// Level distributions per feature for the entry-positive population, with an
/// optional explicit table for the entry-negative population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceTable {
    pub ana_positive: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ana_negative: Option<BTreeMap<String, Vec<f64>>>,
}

impl PrevalenceTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        for (f, p) in t.ana_positive.iter().chain(t.ana_negative.iter().flatten()) {
            check_distribution(f, p)?;
        }
        Ok(t)
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        self.positive_table(schema).map(|_| ())
    }

    fn resolve(schema: &Schema, table: &BTreeMap<String, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        schema
            .features
            .iter()
            .map(|f| {
                let p = table
                    .get(&f.name)
                    .ok_or_else(|| Error::config(format!("no prevalence for feature `{}`", f.name)))?;
                check_distribution(&f.name, p)?;
                let levels = f
                    .kind
                    .levels()
                    .ok_or_else(|| Error::config(format!("feature `{}` is not discrete", f.name)))?;
                if p.len() != levels {
                    return Err(Error::config(format!(
                        "feature `{}`: {} prevalences for {levels} levels",
                        f.name,
                        p.len()
                    )));
                }
                Ok(p.clone())
            })
            .collect()
    }

    /// Distributions for the entry-positive population, in schema order.
    pub fn positive_table(&self, schema: &Schema) -> Result<Vec<Vec<f64>>> {
        Self::resolve(schema, &self.ana_positive)
    }

    /// Distributions for the entry-negative population, in schema order.
    ///
    /// Unless given explicitly, each weighted level gets a prevalence
    /// proportional to the inverse of its criteria weight, scaled so that the
    /// summed prevalence over all weighted levels equals that of the positive
    /// population. Levels without a weight keep their positive prevalence and
    /// the entry feature is fixed to 0.
    pub fn negative_table(&self, schema: &Schema, criteria: &LupusCriteria) -> Result<Vec<Vec<f64>>> {
        if let Some(explicit) = &self.ana_negative {
            return Self::resolve(schema, explicit);
        }
        let positive = self.positive_table(schema)?;
        let entry = schema.require_feature(&criteria.entry_feature)?;
        let mut target = 0.0;
        let mut inverse = 0.0;
        for (j, f) in schema.features.iter().enumerate() {
            if j == entry {
                continue;
            }
            for (level, p) in positive[j].iter().enumerate().skip(1) {
                if let Some(w) = criteria.weight(&f.name, level as i64) {
                    target += p;
                    inverse += 1.0 / w;
                }
            }
        }
        let scale = if inverse > 0.0 { target / inverse } else { 0.0 };
        let mut out = Vec::with_capacity(schema.n_features());
        for (j, f) in schema.features.iter().enumerate() {
            let n = positive[j].len();
            let mut p = vec![0.0; n];
            if j == entry {
                p[0] = 1.0;
            } else {
                for level in 1..n {
                    p[level] = match criteria.weight(&f.name, level as i64) {
                        Some(w) => scale / w,
                        None => positive[j][level],
                    };
                }
                let rest: f64 = p[1..].iter().sum();
                if rest > 1.0 {
                    return Err(Error::config(format!(
                        "feature `{}`: derived negative prevalences exceed 1",
                        f.name
                    )));
                }
                p[0] = 1.0 - rest;
            }
            out.push(p);
        }
        Ok(out)
    }
}

fn draw_population(
    schema: &Schema,
    table: &[Vec<f64>],
    scorer: &LupusScorer,
    n: usize,
    seed: u64,
    stream: u64,
) -> Vec<PatientRecord> {
    let mut rng = stream_rng(seed, stream);
    (0..n)
        .map(|_| {
            let values = table.iter().map(|p| Some(draw_level(&mut rng, p) as f64)).collect();
            let mut r = PatientRecord::new(values, scorer.no_lupus);
            r.label = score_lupus(&r, scorer).label;
            debug_assert_eq!(r.values.len(), schema.n_features());
            r
        })
        .collect()
}

/// Draws `n_positive_ana` entry-positive and `n_negative_ana` entry-negative
/// records (in that order) and labels them with the criteria.
pub fn generate_lupus(
    n_positive_ana: usize,
    n_negative_ana: usize,
    schema: &Schema,
    prevalences: &PrevalenceTable,
    criteria: &LupusCriteria,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let scorer = criteria.compile(schema)?;
    let pos = prevalences.positive_table(schema)?;
    let neg = prevalences.negative_table(schema, criteria)?;
    let entry = scorer.entry;
    let mut pos = pos;
    pos[entry] = vec![0.0; pos[entry].len()];
    pos[entry][1] = 1.0;
    let parts: Vec<Vec<PatientRecord>> = [(&pos, n_positive_ana, 0u64), (&neg, n_negative_ana, 1u64)]
        .par_iter()
        .map(|(table, n, stream)| draw_population(schema, table, &scorer, *n, seed, *stream))
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::defaults;
    use proptest::prelude::*;

    fn setup() -> (Schema, LupusScorer) {
        let schema = defaults::lupus_schema();
        let scorer = defaults::lupus_criteria().compile(&schema).unwrap();
        (schema, scorer)
    }

    fn record(schema: &Schema, positives: &[&str]) -> PatientRecord {
        let mut v = vec![Some(0.0); schema.n_features()];
        for name in positives {
            v[schema.require_feature(name).unwrap()] = Some(1.0);
        }
        PatientRecord::new(v, 0)
    }

    #[test]
    fn only_highest_weight_in_category_counts() {
        let (schema, scorer) = setup();
        let r = record(&schema, &["ana", "delirium", "seizure"]);
        assert_eq!(score_lupus(&r, &scorer).score, 5.0);
    }

    #[test]
    fn all_zero_scores_zero() {
        let (schema, scorer) = setup();
        let s = score_lupus(&record(&schema, &[]), &scorer);
        assert_eq!(s.score, 0.0);
        assert_eq!(s.label, scorer.no_lupus_class());
    }

    #[test]
    fn negative_entry_with_everything_positive_is_not_lupus() {
        let (schema, scorer) = setup();
        let names: Vec<&str> = schema.feature_names().filter(|n| *n != "ana").collect();
        let s = score_lupus(&record(&schema, &names), &scorer);
        assert!(s.score >= 10.0);
        assert_eq!(s.label, scorer.no_lupus_class());
    }

    #[test]
    fn threshold_is_inclusive() {
        let (schema, scorer) = setup();
        // joint 6 + proteinuria 4
        let r = record(&schema, &["ana", "joint_involvement", "proteinuria"]);
        let s = score_lupus(&r, &scorer);
        assert_eq!(s.score, 10.0);
        assert_eq!(s.label, scorer.lupus_class());
    }

    #[test]
    fn missing_feature_counts_as_absent() {
        let (schema, scorer) = setup();
        let mut r = record(&schema, &["ana", "joint_involvement"]);
        r.values[schema.require_feature("proteinuria").unwrap()] = None;
        assert_eq!(score_lupus(&r, &scorer).score, 6.0);
    }

    #[test]
    fn duplicate_feature_across_categories_is_rejected() {
        let mut c = defaults::lupus_criteria();
        c.categories
            .get_mut("renal")
            .unwrap()
            .insert("fever".into(), BTreeMap::from([("1".into(), 1.0)]));
        assert!(c.validate().is_err());
    }

    #[test]
    fn prevalence_outside_unit_interval_is_rejected() {
        let text = r#"{"ana_positive":{"fever":[1.2,-0.2]}}"#;
        assert!(matches!(PrevalenceTable::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn derived_negative_prevalences_are_distributions() {
        let schema = defaults::lupus_schema();
        let criteria = defaults::lupus_criteria();
        let neg = defaults::lupus_prevalence().negative_table(&schema, &criteria).unwrap();
        for p in &neg {
            check_distribution("x", p).unwrap();
        }
        let ana = schema.require_feature("ana").unwrap();
        assert_eq!(neg[ana], vec![1.0, 0.0]);
        // inverse weighting: fever (2) is drawn more often than seizure (5)
        let fever = neg[schema.require_feature("fever").unwrap()][1];
        let seizure = neg[schema.require_feature("seizure").unwrap()][1];
        assert!((fever / seizure - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fever_rate_matches_prevalence() {
        let schema = defaults::lupus_schema();
        let records = generate_lupus(
            50_000,
            0,
            &schema,
            &defaults::lupus_prevalence(),
            &defaults::lupus_criteria(),
            11,
        )
        .unwrap();
        let fever = schema.require_feature("fever").unwrap();
        let rate = records.iter().filter(|r| r.get(fever) == Some(1.0)).count() as f64 / 50_000.0;
        assert!((rate - 0.18).abs() < 0.01, "fever rate {rate}");
    }

    #[test]
    fn generation_is_deterministic_and_ordered() {
        let schema = defaults::lupus_schema();
        let gen = |seed| {
            generate_lupus(
                300,
                200,
                &schema,
                &defaults::lupus_prevalence(),
                &defaults::lupus_criteria(),
                seed,
            )
            .unwrap()
        };
        let a = gen(5);
        assert_eq!(a, gen(5));
        assert_ne!(a, gen(6));
        let ana = schema.require_feature("ana").unwrap();
        assert!(a[..300].iter().all(|r| r.get(ana) == Some(1.0)));
        assert!(a[300..].iter().all(|r| r.get(ana) == Some(0.0) && r.label == 0));
    }

    proptest! {
        #[test]
        fn entry_negative_is_never_lupus(levels in prop::collection::vec(0u8..6, 24)) {
            let (schema, scorer) = setup();
            let values = schema
                .features
                .iter()
                .zip(&levels)
                .map(|(f, l)| {
                    if f.name == "ana" {
                        Some(0.0)
                    } else {
                        Some((*l as usize % f.kind.levels().unwrap()) as f64)
                    }
                })
                .collect();
            let r = PatientRecord::new(values, 0);
            prop_assert_eq!(score_lupus(&r, &scorer).label, scorer.no_lupus_class());
        }
    }
}

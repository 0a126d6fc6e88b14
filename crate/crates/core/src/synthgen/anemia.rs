//! Anemia: class-conditional uniform generation, derived laboratory values,
//! tree labeling and the inconclusive class.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::schema::{Derivation, PatientRecord, Schema, ValueDist};
use super::tree::DecisionTree;
use super::{draw_level, stream_rng};
use crate::error::{Error, Result};

/// Features that keep all values when carving the inconclusive class.
pub const CARVE_PROTECTED: [&str; 3] = ["hemoglobin", "gender", "mcv"];
pub const CARVE_FRACTION: f64 = 0.10;

/// Rejection budget per accepted record before a class is declared unreachable.
const MAX_ATTEMPTS_PER_RECORD: usize = 10_000;

fn draw(rng: &mut impl Rng, dist: &ValueDist) -> f64 {
    match dist {
        ValueDist::Uniform([lo, hi]) => rng.random_range(*lo..*hi),
        ValueDist::Constant(v) => *v,
        ValueDist::Categorical(p) => draw_level(rng, p) as f64,
    }
}

/// Fills every derived feature from its inputs. A derived value whose inputs
/// are missing stays missing.
pub fn derive_features(record: &PatientRecord, schema: &Schema) -> Result<PatientRecord> {
    let mut out = record.clone();
    for (j, f) in schema.features.iter().enumerate() {
        let Some(d) = &f.derived else { continue };
        let input = |name: &str| -> Result<Option<f64>> { Ok(record.get(schema.require_feature(name)?)) };
        out.values[j] = match d {
            Derivation::Product { factor, input: x } => input(x)?.map(|x| factor * x),
            Derivation::Ratio {
                factor,
                numerator,
                denominator,
            } => match (input(numerator)?, input(denominator)?) {
                (Some(_), Some(0.0)) => {
                    return Err(Error::Arithmetic(format!(
                        "`{}` has zero denominator `{denominator}`",
                        f.name
                    )))
                }
                (Some(num), Some(den)) => Some(factor * num / den),
                _ => None,
            },
        };
    }
    Ok(out)
}

fn generate_class(
    schema: &Schema,
    tree: &DecisionTree,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let name = &schema.classes[class];
    let dists: Vec<Option<&ValueDist>> = schema
        .features
        .iter()
        .map(|f| f.generation.as_ref().map(|g| g.for_class(name)))
        .collect();
    let mut rng = stream_rng(seed, class as u64);
    let mut out = Vec::with_capacity(n);
    let budget = n.saturating_mul(MAX_ATTEMPTS_PER_RECORD);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::config(format!(
                "class `{name}` is unreachable under its generation ranges"
            )));
        }
        let values = dists.iter().map(|d| d.map(|d| draw(&mut rng, d))).collect();
        let record = derive_features(&PatientRecord::new(values, class), schema)?;
        if tree.label(&record) == class {
            out.push(record);
        }
    }
    Ok(out)
}

/// Leaf classes of the labeling tree, i.e. every class except inconclusive.
pub fn generated_classes(schema: &Schema, tree: &DecisionTree) -> Vec<usize> {
    (0..schema.n_classes())
        .filter(|&c| c != tree.inconclusive_class())
        .collect()
}

/// Draws `counts[i]` records for the i-th generated class, rejecting draws the
/// tree does not label as that class. Records are grouped by class.
pub fn generate_anemia_counts(
    counts: &[usize],
    schema: &Schema,
    tree: &DecisionTree,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let classes = generated_classes(schema, tree);
    if counts.len() != classes.len() {
        return Err(Error::config(format!(
            "{} class counts for {} generated classes",
            counts.len(),
            classes.len()
        )));
    }
    for f in &schema.features {
        if f.generation.is_none() && f.derived.is_none() {
            return Err(Error::config(format!(
                "feature `{}` has neither a generation rule nor a derivation",
                f.name
            )));
        }
    }
    let parts: Vec<Vec<PatientRecord>> = classes
        .par_iter()
        .zip(counts)
        .map(|(&c, &n)| generate_class(schema, tree, c, n, seed))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn generate_anemia(
    n_per_class: usize,
    schema: &Schema,
    tree: &DecisionTree,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let k = generated_classes(schema, tree).len();
    generate_anemia_counts(&vec![n_per_class; k], schema, tree, seed)
}

/// Splits `total` records as evenly as possible over the generated classes.
pub fn generate_anemia_total(
    total: usize,
    schema: &Schema,
    tree: &DecisionTree,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let k = generated_classes(schema, tree).len();
    let counts: Vec<usize> = (0..k).map(|i| total / k + usize::from(i < total % k)).collect();
    generate_anemia_counts(&counts, schema, tree, seed)
}

/// Removes `fraction` of the present values of every non-protected feature,
/// then relabels every record with the tree.
pub fn carve_inconclusive(
    records: &[PatientRecord],
    schema: &Schema,
    tree: &DecisionTree,
    fraction: f64,
    protected: &[&str],
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("carve fraction {fraction} outside [0, 1]")));
    }
    let protected: Vec<usize> = protected
        .iter()
        .map(|p| schema.require_feature(p))
        .collect::<Result<_>>()?;
    let mut out = records.to_vec();
    let mut rng = stream_rng(seed, u64::MAX);
    for j in 0..schema.n_features() {
        if protected.contains(&j) {
            continue;
        }
        let present: Vec<usize> = (0..out.len()).filter(|&i| out[i].values[j].is_some()).collect();
        let k = (fraction * present.len() as f64).floor() as usize;
        for pick in sample(&mut rng, present.len(), k) {
            out[present[pick]].values[j] = None;
        }
    }
    for r in &mut out {
        r.label = tree.label(r);
    }
    Ok(out)
}

/// The standard anemia dataset: `total` generated records with the
/// inconclusive class carved out.
pub fn anemia_dataset(total: usize, schema: &Schema, tree: &DecisionTree, seed: u64) -> Result<Vec<PatientRecord>> {
    let records = generate_anemia_total(total, schema, tree, seed)?;
    carve_inconclusive(&records, schema, tree, CARVE_FRACTION, &CARVE_PROTECTED, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::defaults;

    fn setup() -> (Schema, DecisionTree) {
        let schema = defaults::anemia_schema();
        let tree = defaults::anemia_tree(&schema);
        (schema, tree)
    }

    fn value(schema: &Schema, r: &PatientRecord, name: &str) -> f64 {
        r.get(schema.require_feature(name).unwrap()).unwrap()
    }

    #[test]
    fn derived_values_by_substitution() {
        let (schema, _) = setup();
        let mut v = vec![None; schema.n_features()];
        let set = |v: &mut Vec<Option<f64>>, n: &str, x: f64| v[schema.require_feature(n).unwrap()] = Some(x);
        set(&mut v, "hemoglobin", 10.0);
        set(&mut v, "serum_iron", 60.0);
        set(&mut v, "tibc", 300.0);
        set(&mut v, "mcv", 100.0);
        let r = derive_features(&PatientRecord::new(v, 0), &schema).unwrap();
        assert_eq!(value(&schema, &r, "tsat"), 20.0);
        assert_eq!(value(&schema, &r, "hematocrit"), 30.0);
        assert_eq!(value(&schema, &r, "rbc"), 3.0);
    }

    #[test]
    fn zero_tibc_is_an_arithmetic_error() {
        let (schema, _) = setup();
        let mut v = vec![Some(1.0); schema.n_features()];
        v[schema.require_feature("tibc").unwrap()] = Some(0.0);
        assert!(matches!(
            derive_features(&PatientRecord::new(v, 0), &schema),
            Err(Error::Arithmetic(_))
        ));
    }

    #[test]
    fn counts_and_labels() {
        let (schema, tree) = setup();
        let records = generate_anemia(50, &schema, &tree, 3).unwrap();
        assert_eq!(records.len(), 350);
        for c in generated_classes(&schema, &tree) {
            assert_eq!(records.iter().filter(|r| r.label == c).count(), 50);
        }
        assert!(records.iter().all(|r| r.is_complete() && tree.label(r) == r.label));
        assert!(generate_anemia(0, &schema, &tree, 3).unwrap().is_empty());
    }

    #[test]
    fn derived_identities_hold() {
        let (schema, tree) = setup();
        for r in generate_anemia(30, &schema, &tree, 9).unwrap() {
            let hb = value(&schema, &r, "hemoglobin");
            let hct = value(&schema, &r, "hematocrit");
            let mcv = value(&schema, &r, "mcv");
            assert!((hct - 3.0 * hb).abs() < 1e-9);
            assert!((value(&schema, &r, "rbc") - 10.0 * hct / mcv).abs() < 1e-9);
            let tsat = 100.0 * value(&schema, &r, "serum_iron") / value(&schema, &r, "tibc");
            assert!((value(&schema, &r, "tsat") - tsat).abs() < 1e-9);
        }
    }

    #[test]
    fn total_is_split_evenly() {
        let (schema, tree) = setup();
        let records = generate_anemia_total(1000, &schema, &tree, 1).unwrap();
        assert_eq!(records.len(), 1000);
    }

    #[test]
    fn carve_zero_is_identity() {
        let (schema, tree) = setup();
        let records = generate_anemia(20, &schema, &tree, 4).unwrap();
        let carved = carve_inconclusive(&records, &schema, &tree, 0.0, &CARVE_PROTECTED, 4).unwrap();
        assert_eq!(carved, records);
    }

    #[test]
    fn carve_keeps_protected_and_count() {
        let (schema, tree) = setup();
        let records = generate_anemia(200, &schema, &tree, 4).unwrap();
        let carved = carve_inconclusive(&records, &schema, &tree, 0.1, &CARVE_PROTECTED, 4).unwrap();
        assert_eq!(carved.len(), records.len());
        for p in CARVE_PROTECTED {
            let j = schema.require_feature(p).unwrap();
            assert!(carved.iter().all(|r| r.values[j].is_some()));
        }
        let ferritin = schema.require_feature("ferritin").unwrap();
        let missing = carved.iter().filter(|r| r.values[ferritin].is_none()).count();
        assert_eq!(missing, 140);
        assert!(carved.iter().any(|r| r.label == tree.inconclusive_class()));
    }

    #[test]
    fn unreachable_class_is_a_config_error() {
        let (mut schema, tree) = setup();
        let mcv = schema.require_feature("mcv").unwrap();
        let gen = schema.features[mcv].generation.as_mut().unwrap();
        gen.per_class
            .insert("Hemolytic anemia".into(), ValueDist::Uniform([60.0, 70.0]));
        let counts = [0, 0, 0, 0, 0, 1, 0];
        assert!(matches!(
            generate_anemia_counts(&counts, &schema, &tree, 0),
            Err(Error::Config(_))
        ));
    }
}

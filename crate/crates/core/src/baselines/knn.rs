//! Nearest-neighbor imputation of missing values.

use rayon::prelude::*;

use crate::synthgen::PatientRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub records: Vec<PatientRecord>,
    /// Records left with missing values: no feature in common with any
    /// donor, or no donor has the feature.
    pub unimputed: Vec<usize>,
}

/// Euclidean distance over co-present features, rescaled by
/// `sqrt(m / present)`; `None` when nothing is co-present.
pub fn nan_euclidean(a: &[Option<f64>], b: &[Option<f64>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut present = 0usize;
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            sum += (x - y).powi(2);
            present += 1;
        }
    }
    (present > 0).then(|| (sum * a.len() as f64 / present as f64).sqrt())
}

/// Replaces each missing value with the value of the nearest reference record
/// (k = 1) among those that have the feature. Ties go to the earliest
/// reference. Labels are untouched.
pub fn knn_impute(records: &[PatientRecord], references: &[PatientRecord]) -> Imputation {
    let filled: Vec<(PatientRecord, bool)> = records
        .par_iter()
        .map(|r| {
            if r.is_complete() {
                return (r.clone(), true);
            }
            let distances: Vec<Option<f64>> = references.iter().map(|d| nan_euclidean(&r.values, &d.values)).collect();
            let mut out = r.clone();
            let mut complete = true;
            for j in 0..r.values.len() {
                if r.values[j].is_some() {
                    continue;
                }
                let mut best: Option<(f64, f64)> = None;
                for (d, dist) in references.iter().zip(&distances) {
                    if let (Some(dist), Some(v)) = (dist, d.values[j]) {
                        if best.is_none_or(|(b, _)| *dist < b) {
                            best = Some((*dist, v));
                        }
                    }
                }
                match best {
                    Some((_, v)) => out.values[j] = Some(v),
                    None => complete = false,
                }
            }
            (out, complete)
        })
        .collect();
    let unimputed = filled
        .iter()
        .enumerate()
        .filter(|(_, (_, ok))| !ok)
        .map(|(i, _)| i)
        .collect();
    Imputation {
        records: filled.into_iter().map(|(r, _)| r).collect(),
        unimputed,
    }
}

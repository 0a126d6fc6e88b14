//! Seeded train/validation/test partition.

use rand::seq::SliceRandom;

use super::schema::PatientRecord;
use super::stream_rng;

pub const TEST_FRACTION: f64 = 0.2;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub validation: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Shuffles once, holds out a fifth as test, then a tenth of the remainder as
/// validation. Degradation is applied to `train` afterwards, so the other two
/// parts always come from the clean data.
pub fn split(records: &[PatientRecord], seed: u64) -> Split {
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0x73));
    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let n_val = (VALIDATION_FRACTION * (n - n_test) as f64).round() as usize;
    let take = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Split {
        test: take(&order[..n_test]),
        validation: take(&order[n_test..n_test + n_val]),
        train: take(&order[n_test + n_val..]),
    }
}

//! Synthetic anemia and lupus datasets: generation, labeling, degradation,
//! splitting and CSV persistence.

pub mod anemia;
pub mod csvio;
pub mod defaults;
pub mod degrade;
pub mod lupus;
pub mod penalty;
pub mod schema;
pub mod split;
pub mod tree;

pub use anemia::{carve_inconclusive, derive_features, generate_anemia};
pub use csvio::{read_csv, write_csv};
pub use degrade::{degrade, DegradationKind, DegradationSpec};
pub use lupus::{generate_lupus, score_lupus, LupusCriteria, LupusScore, PrevalenceTable};
pub use penalty::{compute_penalty_weight, PenaltyWeightTable};
pub use schema::{FeatureKind, FeatureSpec, PatientRecord, Schema, UseCase};
pub use split::{split, Split};
pub use tree::{DecisionTree, DecisionTreeSpec, INCONCLUSIVE};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a level index from a probability vector that sums to one.
pub(crate) fn draw_level(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last level with non-zero mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

//! Evaluation metrics over finished episodes.
//!
//! Rates are stored in `[0, 1]`; reports multiply by 100 only when rendered.

use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};

pub const W_ACCURACY: f64 = 0.9;
pub const W_PATHWAY: f64 = 0.1;

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ending {
    Diagnosed,
    /// A feature was queried twice.
    Repeated,
    /// The step limit was hit.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub actions: Vec<Action>,
    /// Value revealed by each action; `None` for diagnoses and missing values.
    pub observed: Vec<Option<f64>>,
    pub rewards: Vec<f64>,
    pub ending: Ending,
    pub prediction: Option<usize>,
    pub truth: usize,
    /// Softmax over the diagnostic-action values at the final state, when the
    /// agent produces values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl EpisodeRecord {
    pub fn correct(&self) -> bool {
        self.prediction == Some(self.truth)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `1 − Σ w(feature actions before the last element) / Σ w`.
pub fn pathway_score(pathway: &[Action], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let head = &pathway[..pathway.len().saturating_sub(1)];
    let spent: f64 = head
        .iter()
        .filter_map(|a| match a {
            Action::Feature(j) => Some(weights[*j]),
            Action::Diagnose(_) => None,
        })
        .sum();
    1.0 - spent / total
}

/// Mean pathway score of the episodes that reached an end other than
/// truncation.
pub fn aps(episodes: &[EpisodeRecord], weights: &[f64]) -> Result<f64> {
    let scores: Vec<f64> = episodes
        .iter()
        .filter(|e| e.ending != Ending::Truncated)
        .map(|e| pathway_score(&e.actions, weights))
        .collect();
    if scores.is_empty() {
        return Err(Error::Empty("no completed episodes for pathway score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn wpahm_weighted(accuracy: f64, aps: f64, w_a: f64, w_s: f64) -> f64 {
    if accuracy <= 0.0 || aps <= 0.0 {
        return 0.0;
    }
    (w_a + w_s) / (w_a / accuracy + w_s / aps)
}

pub fn wpahm(accuracy: f64, aps: f64) -> f64 {
    wpahm_weighted(accuracy, aps, W_ACCURACY, W_PATHWAY)
}

pub fn accuracy(episodes: &[EpisodeRecord]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().filter(|e| e.correct()).count() as f64 / episodes.len() as f64
}

pub fn mean_episode_length(episodes: &[EpisodeRecord]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(|e| e.len() as f64).sum::<f64>() / episodes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, F1 and support. Episodes without a diagnosis
/// count against recall of their true class and are nobody's prediction.
pub fn classification_report(episodes: &[EpisodeRecord], class_names: &[String]) -> Vec<ClassReport> {
    if episodes.is_empty() {
        return Vec::new();
    }
    let k = class_names.len();
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut support = vec![0usize; k];
    for e in episodes {
        support[e.truth] += 1;
        if let Some(p) = e.prediction {
            predicted[p] += 1;
            if p == e.truth {
                tp[p] += 1;
            }
        }
    }
    (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassReport {
                label: class_names[c].clone(),
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect()
}

/// Unweighted mean F1 over classes that occur in the truth.
pub fn macro_f1(episodes: &[EpisodeRecord], n_classes: usize) -> f64 {
    let names: Vec<String> = (0..n_classes).map(|c| c.to_string()).collect();
    let rows = classification_report(episodes, &names);
    let present: Vec<&ClassReport> = rows.iter().filter(|r| r.support > 0).collect();
    if present.len() < rows.len() {
        log::warn!(
            "{} classes absent from truth are excluded from macro F1",
            rows.len() - present.len()
        );
    }
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|r| r.f1).sum::<f64>() / present.len() as f64
}

/// Mann–Whitney estimate of the area under the ROC curve, ties counted half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if positive[o] {
                rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Scores used for ranking: the recorded softmax, or a one-hot of the
/// prediction when the agent exposes no values.
fn score_vector(e: &EpisodeRecord, n_classes: usize) -> Vec<f64> {
    match &e.scores {
        Some(s) => s.clone(),
        None => {
            let mut v = vec![0.0; n_classes];
            if let Some(p) = e.prediction {
                v[p] = 1.0;
            }
            v
        }
    }
}

/// One-vs-rest ROC-AUC averaged over classes with both positives and negatives.
pub fn macro_roc_auc(episodes: &[EpisodeRecord], n_classes: usize) -> f64 {
    let vectors: Vec<Vec<f64>> = episodes.iter().map(|e| score_vector(e, n_classes)).collect();
    let mut aucs = Vec::new();
    for c in 0..n_classes {
        let scores: Vec<f64> = vectors.iter().map(|v| v[c]).collect();
        let positive: Vec<bool> = episodes.iter().map(|e| e.truth == c).collect();
        match roc_auc(&scores, &positive) {
            Some(a) => aucs.push(a),
            None => log::warn!("class {c} excluded from macro ROC-AUC"),
        }
    }
    if aucs.is_empty() {
        return 0.0;
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub mean_episode_length: f64,
    pub macro_f1: f64,
    pub macro_roc_auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wpahm: Option<f64>,
    pub truncated: usize,
    pub repeated: usize,
    pub classes: Vec<ClassReport>,
    pub roc_auc_scores: String,
}

impl EvalReport {
    /// `weights` enables the pathway metrics (APS and wPAHM).
    pub fn compute(episodes: &[EpisodeRecord], class_names: &[String], weights: Option<&[f64]>) -> Self {
        let acc = accuracy(episodes);
        let aps = weights.and_then(|w| aps(episodes, w).ok());
        Self {
            episodes: episodes.len(),
            accuracy: acc,
            mean_episode_length: mean_episode_length(episodes),
            macro_f1: macro_f1(episodes, class_names.len()),
            macro_roc_auc: macro_roc_auc(episodes, class_names.len()),
            aps,
            wpahm: aps.map(|s| wpahm(acc, s)),
            truncated: episodes.iter().filter(|e| e.ending == Ending::Truncated).count(),
            repeated: episodes.iter().filter(|e| e.ending == Ending::Repeated).count(),
            classes: classification_report(episodes, class_names),
            roc_auc_scores: "softmax over diagnostic-action values".into(),
        }
    }

    /// Plain-text table in the usual classification-report layout.
    pub fn render_classes(&self) -> String {
        let width = self.classes.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:>width$}  {:>9}  {:>6}  {:>8}  {:>7}\n",
            "", "precision", "recall", "f1-score", "support"
        );
        for c in &self.classes {
            out.push_str(&format!(
                "{:>width$}  {:>9.2}  {:>6.2}  {:>8.2}  {:>7}\n",
                c.label, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!(
            "{:>width$}  {:>9}  {:>6}  {:>8.2}  {:>7}\n",
            "accuracy", "", "", self.accuracy, self.episodes
        ));
        out
    }
}

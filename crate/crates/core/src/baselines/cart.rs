//! CART classification tree with Gini impurity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::PatientRecord;

use super::encode_record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
        }
    }
}

impl CartParams {
    pub fn with_depth(max_depth: Option<usize>) -> Self {
        Self {
            max_depth,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartNode {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        class: usize,
        /// Class frequencies of the training samples that reached the leaf.
        probabilities: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeClassifier {
    pub n_features: usize,
    pub n_classes: usize,
    pub params: CartParams,
    /// Node 0 is the root.
    pub nodes: Vec<CartNode>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Best {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    k: usize,
    params: CartParams,
    nodes: Vec<CartNode>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &i in idx {
            c[self.ys[i]] += 1;
        }
        c
    }

    fn leaf(&self, counts: &[usize], n: usize) -> CartNode {
        // first maximum wins ties
        let class = counts
            .iter()
            .enumerate()
            .fold(0, |best, (c, &v)| if v > counts[best] { c } else { best });
        CartNode::Leaf {
            class,
            probabilities: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        }
    }

    fn best_split(&self, idx: &mut [usize], parent: &[usize]) -> Option<Best> {
        let n = idx.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut best: Option<Best> = None;
        let m = self.xs[idx[0]].len();
        for f in 0..m {
            idx.sort_by(|&a, &b| {
                self.xs[a][f]
                    .partial_cmp(&self.xs[b][f])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut left = vec![0usize; self.k];
            let mut right = parent.to_vec();
            for pos in 0..n - 1 {
                let y = self.ys[idx[pos]];
                left[y] += 1;
                right[y] -= 1;
                let (lo, hi) = (self.xs[idx[pos]][f], self.xs[idx[pos + 1]][f]);
                let nl = pos + 1;
                if lo == hi || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let impurity = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.as_ref().is_none_or(|b| impurity < b.impurity - 1e-12) {
                    best = Some(Best {
                        feature: f,
                        threshold: lo + (hi - lo) / 2.0,
                        impurity,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let counts = self.counts(idx);
        let id = self.nodes.len();
        self.nodes.push(self.leaf(&counts, n));
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || n < self.params.min_samples_split.max(2) || self.params.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let Some(best) = self.best_split(idx, &counts) else {
            return id;
        };
        if best.impurity >= gini(&counts, n) - 1e-12 {
            return id;
        }
        let (mut l, mut r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.xs[i][best.feature] <= best.threshold);
        let left = self.grow(&mut l, depth + 1);
        let right = self.grow(&mut r, depth + 1);
        self.nodes[id] = CartNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }
}

impl TreeClassifier {
    /// Fits on dense rows; ties between equally good splits go to the lowest
    /// feature index, then the lowest threshold.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], n_classes: usize, params: CartParams) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", xs.len(), ys.len())));
        }
        let m = xs[0].len();
        if xs.iter().any(|x| x.len() != m) {
            return Err(Error::Shape("rows differ in width".into()));
        }
        if let Some(&y) = ys.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Shape(format!("label {y} outside {n_classes} classes")));
        }
        let mut b = Builder {
            xs,
            ys,
            k: n_classes,
            params,
            nodes: Vec::new(),
        };
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        b.grow(&mut idx, 0);
        Ok(Self {
            n_features: m,
            n_classes,
            params,
            nodes: b.nodes,
        })
    }

    /// Fits on records, encoding missing values with the sentinel.
    pub fn fit_records(records: &[PatientRecord], n_classes: usize, params: CartParams) -> Result<Self> {
        let xs: Vec<Vec<f64>> = records.iter().map(|r| encode_record(&r.values)).collect();
        let ys: Vec<usize> = records.iter().map(|r| r.label).collect();
        Self::fit(&xs, &ys, n_classes, params)
    }

    fn leaf_of(&self, x: &[f64]) -> &CartNode {
        let mut n = 0;
        loop {
            match &self.nodes[n] {
                CartNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => n = if x[*feature] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        match self.leaf_of(x) {
            CartNode::Leaf { class, .. } => *class,
            CartNode::Split { .. } => unreachable!("walk ends at a leaf"),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> &[f64] {
        match self.leaf_of(x) {
            CartNode::Leaf { probabilities, .. } => probabilities,
            CartNode::Split { .. } => unreachable!("walk ends at a leaf"),
        }
    }

    pub fn predict_record(&self, record: &PatientRecord) -> usize {
        self.predict(&encode_record(&record.values))
    }

    pub fn accuracy(&self, records: &[PatientRecord]) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let hits = records.iter().filter(|r| self.predict_record(r) == r.label).count();
        hits as f64 / records.len() as f64
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[CartNode], n: usize) -> usize {
            match &nodes[n] {
                CartNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                CartNode::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    /// Fits one tree per depth and keeps the best on `validation`; the
    /// earliest depth wins ties.
    pub fn fit_grid(
        train: &[PatientRecord],
        validation: &[PatientRecord],
        n_classes: usize,
        depths: &[Option<usize>],
    ) -> Result<Self> {
        let mut best: Option<(f64, Self)> = None;
        for &d in depths {
            let tree = Self::fit_records(train, n_classes, CartParams::with_depth(d))?;
            let acc = tree.accuracy(validation);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, tree));
            }
        }
        best.map(|(_, t)| t)
            .ok_or_else(|| Error::Empty("empty depth grid".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

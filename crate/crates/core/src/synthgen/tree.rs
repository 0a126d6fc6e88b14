//! Labeling decision tree for the anemia use case.
//!
//! Trees are loaded from JSON: a map of named nodes plus a root name. Nodes may
//! be shared by several parents (the anemic sub-tree is reachable from both
//! hemoglobin thresholds), so the structure is validated as a DAG.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::schema::{PatientRecord, Schema};
use crate::error::{Error, Result};

pub const INCONCLUSIVE: &str = "Inconclusive diagnosis";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeSpec {
    /// `value < threshold` follows `below`, otherwise `above`.
    Split {
        feature: String,
        threshold: f64,
        below: String,
        above: String,
    },
    /// Discrete test; keys are the integer level rendered as a string.
    Category {
        feature: String,
        branches: BTreeMap<String, String>,
    },
    Leaf(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeSpec {
    pub root: String,
    pub nodes: BTreeMap<String, NodeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        below: usize,
        above: usize,
    },
    Category {
        feature: usize,
        /// Child per level.
        branches: Vec<usize>,
    },
    Leaf(usize),
}

/// Result of walking the tree over a (possibly incomplete) record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Walk {
    Leaf(usize),
    /// The walk needed this feature but the record lacks it.
    Missing(usize),
}

/// A validated tree with feature and class names resolved to schema indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    root: usize,
    inconclusive: usize,
}

impl DecisionTreeSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn compile(&self, schema: &Schema) -> Result<DecisionTree> {
        let ids: BTreeMap<&str, usize> = self.nodes.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let resolve = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("tree references unknown node `{name}`")))
        };
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (name, spec) in &self.nodes {
            let node = match spec {
                NodeSpec::Split {
                    feature,
                    threshold,
                    below,
                    above,
                } => {
                    if !threshold.is_finite() {
                        return Err(Error::config(format!("node `{name}`: non-finite threshold")));
                    }
                    Node::Split {
                        feature: schema.require_feature(feature)?,
                        threshold: *threshold,
                        below: resolve(below)?,
                        above: resolve(above)?,
                    }
                }
                NodeSpec::Category { feature, branches } => {
                    let j = schema.require_feature(feature)?;
                    let levels = schema.features[j].kind.levels().ok_or_else(|| {
                        Error::config(format!("node `{name}`: category test on continuous `{feature}`"))
                    })?;
                    let mut children = vec![usize::MAX; levels];
                    for (level, child) in branches {
                        let level: usize = level
                            .parse()
                            .map_err(|_| Error::config(format!("node `{name}`: bad level key `{level}`")))?;
                        if level >= levels {
                            return Err(Error::config(format!("node `{name}`: level {level} out of range")));
                        }
                        children[level] = resolve(child)?;
                    }
                    if children.contains(&usize::MAX) {
                        return Err(Error::config(format!(
                            "node `{name}`: category branches do not cover all {levels} levels"
                        )));
                    }
                    Node::Category {
                        feature: j,
                        branches: children,
                    }
                }
                NodeSpec::Leaf(label) => Node::Leaf(schema.require_class(label)?),
            };
            nodes.push(node);
        }
        let tree = DecisionTree {
            root: resolve(&self.root)?,
            inconclusive: schema.require_class(INCONCLUSIVE)?,
            nodes,
        };
        tree.check_acyclic()?;
        Ok(tree)
    }
}

impl DecisionTree {
    fn check_acyclic(&self) -> Result<()> {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn visit(tree: &DecisionTree, n: usize, state: &mut [u8]) -> Result<()> {
            match state[n] {
                1 => return Err(Error::config("decision tree contains a cycle")),
                2 => return Ok(()),
                _ => {}
            }
            state[n] = 1;
            for c in tree.children(n) {
                visit(tree, c, state)?;
            }
            state[n] = 2;
            Ok(())
        }
        let mut state = vec![0u8; self.nodes.len()];
        visit(self, self.root, &mut state)
    }

    fn children(&self, n: usize) -> Vec<usize> {
        match &self.nodes[n] {
            Node::Split { below, above, .. } => vec![*below, *above],
            Node::Category { branches, .. } => branches.clone(),
            Node::Leaf(_) => Vec::new(),
        }
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, n: usize) -> &Node {
        &self.nodes[n]
    }

    pub fn inconclusive_class(&self) -> usize {
        self.inconclusive
    }

    /// Follows one node given the value of its feature; `None` at leaves.
    pub fn next(&self, n: usize, value: f64) -> Option<usize> {
        match &self.nodes[n] {
            Node::Split {
                threshold,
                below,
                above,
                ..
            } => Some(if value < *threshold { *below } else { *above }),
            Node::Category { branches, .. } => {
                let level = value.round().clamp(0.0, (branches.len() - 1) as f64) as usize;
                Some(branches[level])
            }
            Node::Leaf(_) => None,
        }
    }

    pub fn node_feature(&self, n: usize) -> Option<usize> {
        match &self.nodes[n] {
            Node::Split { feature, .. } | Node::Category { feature, .. } => Some(*feature),
            Node::Leaf(_) => None,
        }
    }

    /// Walks the tree using `lookup` for feature values.
    pub fn walk_with(&self, mut lookup: impl FnMut(usize) -> Option<f64>) -> Walk {
        let mut n = self.root;
        loop {
            if let Node::Leaf(class) = self.nodes[n] {
                return Walk::Leaf(class);
            }
            let feature = self.node_feature(n).expect("internal node");
            match lookup(feature) {
                Some(v) => n = self.next(n, v).expect("internal node"),
                None => return Walk::Missing(feature),
            }
        }
    }

    pub fn walk(&self, record: &PatientRecord) -> Walk {
        self.walk_with(|j| record.get(j))
    }

    /// Label assigned by the tree; a missing value on the path yields the
    /// inconclusive class.
    pub fn label(&self, record: &PatientRecord) -> usize {
        match self.walk(record) {
            Walk::Leaf(c) => c,
            Walk::Missing(_) => self.inconclusive,
        }
    }

    /// Longest root-to-leaf path counted in distinct features queried.
    pub fn depth(&self) -> usize {
        fn go(tree: &DecisionTree, n: usize, seen: &mut Vec<usize>) -> usize {
            let Some(f) = tree.node_feature(n) else {
                return 0;
            };
            let fresh = !seen.contains(&f);
            if fresh {
                seen.push(f);
            }
            let best = tree
                .children(n)
                .into_iter()
                .map(|c| go(tree, c, seen))
                .max()
                .unwrap_or(0);
            if fresh {
                seen.pop();
            }
            best + usize::from(fresh)
        }
        go(self, self.root, &mut Vec::new())
    }

    /// For every leaf class, the split thresholds of each feature met on any
    /// root-to-leaf path ending in that class. Category tests contribute the
    /// feature with no thresholds.
    pub fn branch_thresholds(&self) -> BTreeMap<usize, BTreeMap<usize, BTreeSet<OrderedThreshold>>> {
        let mut out: BTreeMap<usize, BTreeMap<usize, BTreeSet<OrderedThreshold>>> = BTreeMap::new();
        let mut path: Vec<(usize, Option<f64>)> = Vec::new();
        fn go(
            tree: &DecisionTree,
            n: usize,
            path: &mut Vec<(usize, Option<f64>)>,
            out: &mut BTreeMap<usize, BTreeMap<usize, BTreeSet<OrderedThreshold>>>,
        ) {
            match &tree.nodes[n] {
                Node::Leaf(class) => {
                    let entry = out.entry(*class).or_default();
                    for (f, t) in path.iter() {
                        let set = entry.entry(*f).or_default();
                        if let Some(t) = t {
                            set.insert(OrderedThreshold(*t));
                        }
                    }
                }
                Node::Split {
                    feature,
                    threshold,
                    below,
                    above,
                } => {
                    path.push((*feature, Some(*threshold)));
                    go(tree, *below, path, out);
                    go(tree, *above, path, out);
                    path.pop();
                }
                Node::Category { feature, branches } => {
                    path.push((*feature, None));
                    for c in branches {
                        go(tree, *c, path, out);
                    }
                    path.pop();
                }
            }
        }
        go(self, self.root, &mut path, &mut out);
        out
    }
}

/// Total order wrapper for finite thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedThreshold(pub f64);

impl Eq for OrderedThreshold {}

impl PartialOrd for OrderedThreshold {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedThreshold {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::defaults;

    fn record(schema: &Schema, values: &[(&str, f64)]) -> PatientRecord {
        let mut v = vec![None; schema.n_features()];
        for (name, x) in values {
            v[schema.require_feature(name).unwrap()] = Some(*x);
        }
        PatientRecord::new(v, 0)
    }

    fn label_of(values: &[(&str, f64)]) -> String {
        let schema = defaults::anemia_schema();
        let tree = defaults::anemia_tree(&schema);
        schema.classes[tree.label(&record(&schema, values))].clone()
    }

    #[test]
    fn male_above_threshold_is_not_anemic() {
        assert_eq!(label_of(&[("hemoglobin", 14.57), ("gender", 1.0)]), "No anemia");
    }

    #[test]
    fn male_between_thresholds_goes_to_anemic_branch() {
        assert_eq!(
            label_of(&[("hemoglobin", 12.5), ("gender", 1.0), ("mcv", 90.0), ("ret_count", 1.0)]),
            "Aplastic anemia"
        );
        assert_eq!(label_of(&[("hemoglobin", 12.5), ("gender", 0.0)]), "No anemia");
    }

    #[test]
    fn high_reticulocytes_are_hemolytic() {
        assert_eq!(
            label_of(&[("hemoglobin", 9.5), ("mcv", 90.0), ("ret_count", 4.0)]),
            "Hemolytic anemia"
        );
    }

    #[test]
    fn missing_node_feature_is_inconclusive() {
        assert_eq!(label_of(&[("hemoglobin", 9.5)]), INCONCLUSIVE);
    }

    #[test]
    fn microcytic_branch_uses_tibc_in_the_grey_zone() {
        let base = [("hemoglobin", 9.0), ("mcv", 77.0)];
        let with = |extra: &[(&str, f64)]| {
            let mut v = base.to_vec();
            v.extend_from_slice(extra);
            label_of(&v)
        };
        assert_eq!(with(&[("ferritin", 10.0)]), "Iron deficiency anemia");
        assert_eq!(with(&[("ferritin", 250.0)]), "Anemia of chronic disease");
        assert_eq!(with(&[("ferritin", 60.0), ("tibc", 450.0)]), "Iron deficiency anemia");
        assert_eq!(
            with(&[("ferritin", 60.0), ("tibc", 250.0)]),
            "Anemia of chronic disease"
        );
        assert_eq!(with(&[("ferritin", 60.0)]), INCONCLUSIVE);
    }

    #[test]
    fn cycle_is_rejected() {
        let schema = defaults::anemia_schema();
        let mut spec = defaults::anemia_tree_spec();
        spec.nodes.insert(
            "retic".into(),
            NodeSpec::Split {
                feature: "ret_count".into(),
                threshold: 2.0,
                below: "hb".into(),
                above: "hemolytic".into(),
            },
        );
        assert!(spec.compile(&schema).is_err());
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let schema = defaults::anemia_schema();
        let mut spec = defaults::anemia_tree_spec();
        spec.nodes.insert(
            "retic".into(),
            NodeSpec::Split {
                feature: "platelets".into(),
                threshold: 2.0,
                below: "aplastic".into(),
                above: "hemolytic".into(),
            },
        );
        assert!(matches!(spec.compile(&schema), Err(Error::Config(_))));
    }

    #[test]
    fn hemolytic_branch_thresholds() {
        let schema = defaults::anemia_schema();
        let tree = defaults::anemia_tree(&schema);
        let hem = schema.require_class("Hemolytic anemia").unwrap();
        let mcv = schema.require_feature("mcv").unwrap();
        let ret = schema.require_feature("ret_count").unwrap();
        let branch = &tree.branch_thresholds()[&hem];
        let mcv_t: Vec<f64> = branch[&mcv].iter().map(|t| t.0).collect();
        assert_eq!(mcv_t, vec![80.0, 100.0]);
        assert_eq!(branch[&ret].iter().map(|t| t.0).collect::<Vec<_>>(), vec![2.0]);
    }

    #[test]
    fn depth_counts_distinct_features() {
        let schema = defaults::anemia_schema();
        let tree = defaults::anemia_tree(&schema);
        // hemoglobin, gender, mcv, ferritin, tibc
        assert_eq!(tree.depth(), 5);
    }
}

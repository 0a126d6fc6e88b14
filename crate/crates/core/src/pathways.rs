//! Diagnostic pathways: extraction from episodes and aggregation into
//! layered Sankey graphs with per-node value statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::metrics::{Ending, EpisodeRecord};
use crate::synthgen::Schema;

pub const GRAPH_SCHEMA: &str = "pathway-graph/1";

/// One episode's action sequence with the values it revealed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub actions: Vec<Action>,
    pub observed: Vec<Option<f64>>,
    /// Terminal diagnosis; `None` when the episode ended without one.
    pub diagnosis: Option<usize>,
    pub truth: usize,
}

impl Pathway {
    pub fn is_diagnosed(&self) -> bool {
        self.diagnosis.is_some()
    }
}

pub fn extract(episodes: &[EpisodeRecord]) -> Vec<Pathway> {
    episodes
        .iter()
        .map(|e| Pathway {
            actions: e.actions.clone(),
            observed: e.observed.clone(),
            diagnosis: match e.ending {
                Ending::Diagnosed => e.prediction,
                Ending::Repeated | Ending::Truncated => None,
            },
            truth: e.truth,
        })
        .collect()
}

/// Distinct action sequences with their multiplicities.
pub fn multiset(pathways: &[Pathway]) -> BTreeMap<Vec<Action>, usize> {
    let mut m = BTreeMap::new();
    for p in pathways {
        *m.entry(p.actions.clone()).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFilter {
    /// Keep only pathways ending in these diagnoses.
    pub classes: Option<Vec<usize>>,
    /// Keep the `k` most frequent distinct pathways of each diagnosis.
    pub top_k: Option<usize>,
    /// Merge nodes by action alone instead of by (depth, action).
    pub collapse_depth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Feature,
    Diagnosis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub depth: usize,
    pub label: String,
    /// Number of traversals.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLink {
    pub source: usize,
    pub target: usize,
    pub value: usize,
    /// Traversals by terminal diagnosis name.
    pub classes: BTreeMap<String, usize>,
}

/// Summary of the values revealed at a feature node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub count: usize,
    /// Traversals that revealed a value (the rest hit a missing one).
    pub present: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayGraph {
    pub schema: String,
    pub nodes: Vec<GraphNode>,
    pub links: Vec<GraphLink>,
    /// Keyed by node id.
    pub stats: BTreeMap<String, NodeStats>,
    /// Pathways left out because they ended without a diagnosis.
    pub undiagnosed: usize,
}

impl Default for PathwayGraph {
    fn default() -> Self {
        Self {
            schema: GRAPH_SCHEMA.to_owned(),
            nodes: Vec::new(),
            links: Vec::new(),
            stats: BTreeMap::new(),
            undiagnosed: 0,
        }
    }
}

type NodeKey = (usize, Action);

#[derive(Default)]
struct NodeAcc {
    count: usize,
    present: usize,
    sum: f64,
    min: Option<f64>,
    max: Option<f64>,
}

fn action_label(schema: &Schema, a: Action) -> String {
    match a {
        Action::Feature(j) => schema.features[j].name.clone(),
        Action::Diagnose(c) => schema.classes[c].clone(),
    }
}

/// Keeps the `k` most frequent distinct sequences per diagnosis; sequences
/// of equal frequency are ranked in action order.
fn top_k_per_class(pathways: Vec<&Pathway>, k: usize) -> Vec<&Pathway> {
    let mut by_class: BTreeMap<Option<usize>, BTreeMap<&[Action], usize>> = BTreeMap::new();
    for p in &pathways {
        *by_class
            .entry(p.diagnosis)
            .or_default()
            .entry(p.actions.as_slice())
            .or_insert(0) += 1;
    }
    let mut keep: BTreeMap<Option<usize>, Vec<&[Action]>> = BTreeMap::new();
    for (class, counts) in by_class {
        let mut ranked: Vec<(&[Action], usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        keep.insert(class, ranked.into_iter().take(k).map(|(s, _)| s).collect());
    }
    pathways
        .into_iter()
        .filter(|p| keep[&p.diagnosis].contains(&p.actions.as_slice()))
        .collect()
}

/// Merges pathways into a layered graph. Without `collapse_depth`, the same
/// action at two depths gives two nodes.
pub fn aggregate(pathways: &[Pathway], schema: &Schema, filter: &GraphFilter) -> PathwayGraph {
    let mut graph = PathwayGraph::default();
    if filter.top_k == Some(0) {
        return graph;
    }
    let mut kept: Vec<&Pathway> = Vec::new();
    for p in pathways {
        if !p.is_diagnosed() {
            graph.undiagnosed += 1;
            continue;
        }
        if let Some(classes) = &filter.classes {
            if !classes.contains(&p.diagnosis.expect("diagnosed")) {
                continue;
            }
        }
        kept.push(p);
    }
    if let Some(k) = filter.top_k {
        kept = top_k_per_class(kept, k);
    }

    let key = |depth: usize, a: Action| -> NodeKey { (if filter.collapse_depth { 0 } else { depth }, a) };
    let mut nodes: BTreeMap<NodeKey, NodeAcc> = BTreeMap::new();
    let mut depth_of: BTreeMap<NodeKey, usize> = BTreeMap::new();
    let mut links: BTreeMap<(NodeKey, NodeKey), BTreeMap<String, usize>> = BTreeMap::new();
    for p in &kept {
        let class = schema.classes[p.diagnosis.expect("diagnosed")].clone();
        for (d, &a) in p.actions.iter().enumerate() {
            let k = key(d, a);
            let acc = nodes.entry(k).or_default();
            acc.count += 1;
            if let (Action::Feature(_), Some(Some(v))) = (a, p.observed.get(d)) {
                acc.present += 1;
                acc.sum += v;
                acc.min = Some(acc.min.map_or(*v, |m| m.min(*v)));
                acc.max = Some(acc.max.map_or(*v, |m| m.max(*v)));
            }
            let e = depth_of.entry(k).or_insert(d);
            *e = (*e).min(d);
            if d > 0 {
                let src = key(d - 1, p.actions[d - 1]);
                *links.entry((src, k)).or_default().entry(class.clone()).or_insert(0) += 1;
            }
        }
    }

    // canonical order: depth, then count descending, then label
    let mut order: Vec<NodeKey> = nodes.keys().copied().collect();
    order.sort_by(|a, b| {
        depth_of[a]
            .cmp(&depth_of[b])
            .then(nodes[b].count.cmp(&nodes[a].count))
            .then(action_label(schema, a.1).cmp(&action_label(schema, b.1)))
            .then(a.cmp(b))
    });
    let id: BTreeMap<NodeKey, usize> = order.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    for (i, k) in order.iter().enumerate() {
        let acc = &nodes[k];
        let kind = match k.1 {
            Action::Feature(_) => NodeKind::Feature,
            Action::Diagnose(_) => NodeKind::Diagnosis,
        };
        graph.nodes.push(GraphNode {
            id: i,
            kind,
            depth: depth_of[k],
            label: action_label(schema, k.1),
            count: acc.count,
        });
        if kind == NodeKind::Feature {
            graph.stats.insert(
                i.to_string(),
                NodeStats {
                    count: acc.count,
                    present: acc.present,
                    mean: (acc.present > 0).then(|| acc.sum / acc.present as f64),
                    min: acc.min,
                    max: acc.max,
                },
            );
        }
    }
    graph.links = links
        .into_iter()
        .map(|((s, t), classes)| GraphLink {
            source: id[&s],
            target: id[&t],
            value: classes.values().sum(),
            classes,
        })
        .collect();
    graph.links.sort_by(|a, b| {
        a.source
            .cmp(&b.source)
            .then(b.value.cmp(&a.value))
            .then(a.target.cmp(&b.target))
    });
    graph
}

impl PathwayGraph {
    /// Checks a layered graph: every node's inflow plus the pathways starting
    /// there equals its count, and likewise for outflow plus pathways ending
    /// there.
    pub fn check_conservation(&self) -> Result<()> {
        let n = self.nodes.len();
        let (mut inflow, mut outflow) = (vec![0usize; n], vec![0usize; n]);
        for l in &self.links {
            if l.source >= n || l.target >= n {
                return Err(Error::Shape(format!("link {} → {} out of range", l.source, l.target)));
            }
            if l.value > self.nodes[l.source].count {
                return Err(Error::Arithmetic(format!(
                    "link {} → {} exceeds its source count",
                    l.source, l.target
                )));
            }
            outflow[l.source] += l.value;
            inflow[l.target] += l.value;
        }
        let starts: usize = self.nodes.iter().filter(|x| x.depth == 0).map(|x| x.count).sum();
        let ends: usize = self
            .nodes
            .iter()
            .filter(|x| x.kind == NodeKind::Diagnosis)
            .map(|x| x.count)
            .sum();
        if starts != ends {
            return Err(Error::Arithmetic(format!("{starts} pathways start but {ends} end")));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let started = if node.depth == 0 { node.count } else { 0 };
            let ended = if node.kind == NodeKind::Diagnosis {
                node.count
            } else {
                0
            };
            if inflow[i] + started != node.count || outflow[i] + ended != node.count {
                return Err(Error::Arithmetic(format!(
                    "node {i} ({}): in {} out {} count {}",
                    node.label, inflow[i], outflow[i], node.count
                )));
            }
        }
        Ok(())
    }

    /// Pathways through the graph, equal to the diagnosis-node total.
    pub fn episode_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Diagnosis)
            .map(|n| n.count)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        if g.schema != GRAPH_SCHEMA {
            return Err(Error::Unsupported(format!("graph schema `{}`", g.schema)));
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::defaults;
    use proptest::prelude::*;

    fn p(actions: &[Action], diagnosis: Option<usize>) -> Pathway {
        Pathway {
            actions: actions.to_vec(),
            observed: actions
                .iter()
                .map(|a| match a {
                    Action::Feature(j) => Some(*j as f64 + 0.5),
                    Action::Diagnose(_) => None,
                })
                .collect(),
            diagnosis,
            truth: diagnosis.unwrap_or(0),
        }
    }

    use Action::{Diagnose as D, Feature as F};

    #[test]
    fn shared_prefix_merges() {
        let schema = defaults::anemia_schema();
        let paths = vec![p(&[F(0), F(5), D(1)], Some(1)), p(&[F(0), F(5), D(2)], Some(2))];
        let g = aggregate(&paths, &schema, &GraphFilter::default());
        assert_eq!(g.nodes.len(), 4);
        let ab = g.links.iter().find(|l| g.nodes[l.source].depth == 0).unwrap();
        assert_eq!(ab.value, 2);
        let out: Vec<usize> = g
            .links
            .iter()
            .filter(|l| l.source == ab.target)
            .map(|l| l.value)
            .collect();
        assert_eq!(out, vec![1, 1]);
        g.check_conservation().unwrap();
        assert_eq!(g.stats["0"].mean, Some(0.5));
    }

    #[test]
    fn top_k_keeps_commonest() {
        let schema = defaults::anemia_schema();
        let p1 = p(&[F(0), D(1)], Some(1));
        let p2 = p(&[F(0), F(5), D(1)], Some(1));
        let paths = vec![p1.clone(), p1.clone(), p1.clone(), p2];
        let g = aggregate(
            &paths,
            &schema,
            &GraphFilter {
                top_k: Some(1),
                ..GraphFilter::default()
            },
        );
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.episode_count(), 3);
        let empty = aggregate(
            &paths,
            &schema,
            &GraphFilter {
                top_k: Some(0),
                ..GraphFilter::default()
            },
        );
        assert!(empty.nodes.is_empty());
    }

    #[test]
    fn undiagnosed_pathways_are_counted_apart() {
        let schema = defaults::anemia_schema();
        let paths = vec![p(&[F(0), F(0)], None), p(&[F(0), D(1)], Some(1))];
        let g = aggregate(&paths, &schema, &GraphFilter::default());
        assert_eq!(g.undiagnosed, 1);
        assert_eq!(g.episode_count(), 1);
        assert_eq!(
            multiset(&[paths[1].clone(), paths[1].clone()]).values().next(),
            Some(&2)
        );
    }

    #[test]
    fn empty_graph_exports_empty_arrays() {
        let json = PathwayGraph::default().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["nodes"], serde_json::json!([]));
        assert_eq!(v["links"], serde_json::json!([]));
        assert_eq!(v["stats"], serde_json::json!({}));
    }

    fn arb_pathways() -> impl Strategy<Value = Vec<Pathway>> {
        let one = (prop::collection::vec(0usize..6, 0..5), 0usize..3, any::<bool>()).prop_map(|(fs, c, done)| {
            let mut seen = Vec::new();
            for f in fs {
                if !seen.contains(&f) {
                    seen.push(f);
                }
            }
            let mut actions: Vec<Action> = seen.into_iter().map(F).collect();
            if done || actions.is_empty() {
                actions.push(D(c));
                p(&actions, Some(c))
            } else {
                p(&actions, None)
            }
        });
        prop::collection::vec(one, 0..40)
    }

    proptest! {
        #[test]
        fn conservation_and_round_trip(paths in arb_pathways(), collapse in any::<bool>()) {
            let schema = defaults::anemia_schema();
            let filter = GraphFilter { collapse_depth: collapse, ..GraphFilter::default() };
            let g = aggregate(&paths, &schema, &filter);
            if !collapse {
                prop_assert!(g.check_conservation().is_ok());
            }
            let diagnosed = paths.iter().filter(|x| x.is_diagnosed()).count();
            prop_assert_eq!(g.episode_count(), diagnosed);
            for s in g.stats.values() {
                if let (Some(lo), Some(m), Some(hi)) = (s.min, s.mean, s.max) {
                    prop_assert!(lo <= m && m <= hi);
                }
            }
            let json = g.to_json().unwrap();
            prop_assert_eq!(PathwayGraph::from_json(&json).unwrap().to_json().unwrap(), json);
        }

        #[test]
        fn class_filter_commutes(paths in arb_pathways(), class in 0usize..3) {
            let schema = defaults::anemia_schema();
            let filter = GraphFilter { classes: Some(vec![class]), ..GraphFilter::default() };
            let a = aggregate(&paths, &schema, &filter);
            let only: Vec<Pathway> = paths.iter().filter(|x| x.diagnosis == Some(class)).cloned().collect();
            let b = aggregate(&only, &schema, &GraphFilter::default());
            prop_assert_eq!(a.nodes, b.nodes);
            prop_assert_eq!(a.links, b.links);
            prop_assert_eq!(a.stats, b.stats);
        }
    }
}

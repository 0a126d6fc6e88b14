use std::collections::BTreeMap;

use pathrl_core::drl::{self, select_checkpoint, Selection, TrainConfig};
use pathrl_core::env::{Action, ActionSpace, EnvConfig, SENTINEL};
use pathrl_core::synthgen::{PatientRecord, Schema};

const TOY_SCHEMA: &str = r#"{
  "use_case": "anemia",
  "classes": ["negative", "positive"],
  "features": [
    {"name": "x0", "kind": "binary", "range": [0, 1]},
    {"name": "x1", "kind": "binary", "range": [0, 1]}
  ]
}"#;

fn toy() -> (Schema, Vec<PatientRecord>) {
    let schema = Schema::from_json(TOY_SCHEMA).unwrap();
    let records = (0..4)
        .map(|i| {
            let (x0, x1) = ((i & 1) as f64, (i >> 1) as f64);
            PatientRecord::new(vec![Some(x0), Some(x1)], x0 as usize)
        })
        .collect();
    (schema, records)
}

type State = [i8; 2];

/// Exact Q* over observation states, with records drawn uniformly.
fn value_iteration(records: &[PatientRecord], gamma: f64) -> BTreeMap<State, Vec<f64>> {
    let consistent = |s: &State| -> Vec<&PatientRecord> {
        records
            .iter()
            .filter(|r| (0..2).all(|j| s[j] < 0 || r.get(j) == Some(s[j] as f64)))
            .collect()
    };
    let states: Vec<State> = (0..9).map(|i| [(i % 3) as i8 - 1, (i / 3) as i8 - 1]).collect();
    let mut v: BTreeMap<State, f64> = states.iter().map(|s| (*s, 0.0)).collect();
    let mut q = BTreeMap::new();
    for _ in 0..100 {
        for s in &states {
            let rs = consistent(s);
            let mut row = Vec::new();
            for j in 0..2 {
                if s[j] >= 0 {
                    row.push(-1.0);
                } else {
                    let next: f64 = rs
                        .iter()
                        .map(|r| {
                            let mut t = *s;
                            t[j] = r.get(j).unwrap() as i8;
                            v[&t]
                        })
                        .sum::<f64>()
                        / rs.len() as f64;
                    row.push(gamma * next);
                }
            }
            for c in 0..2 {
                let p = rs.iter().filter(|r| r.label == c).count() as f64 / rs.len() as f64;
                row.push(2.0 * p - 1.0);
            }
            q.insert(*s, row);
        }
        for s in &states {
            v.insert(*s, q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    q
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_timesteps: 60_000,
        learning_starts: 1_000,
        target_update_interval: 500,
        buffer_size: 10_000,
        exploration_fraction: 0.5,
        epsilon_final: 0.3,
        train_frequency: 1,
        batch_size: 64,
        hidden: vec![32, 32],
        checkpoints: 3,
        double: true,
        seed,
        ..TrainConfig::default()
    }
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn toy_greedy_values_match_value_iteration() {
    let (schema, records) = toy();
    let cfg = toy_config(0);
    let env = EnvConfig::anemia(&schema);
    let out = drl::train(&schema, &env, &cfg, &records, &records).unwrap();
    let net = &out.checkpoints.last().unwrap().artifact.network;
    let oracle = value_iteration(&records, cfg.gamma);
    assert!((oracle[&[-1, -1]][0] - 0.99).abs() < 1e-12);
    for (s, expected) in &oracle {
        let obs: Vec<f64> = s.iter().map(|&x| if x < 0 { SENTINEL } else { x as f64 }).collect();
        let q = net.forward(&obs).unwrap();
        let greedy = drl::rollout::GreedyAgent::new(net, ActionSpace::of(&schema))
            .unwrap()
            .decide(&obs)
            .unwrap();
        let a = ActionSpace::of(&schema).index(greedy.action);
        assert!(
            (max(&q) - max(expected)).abs() < 1e-2,
            "state {s:?}: greedy value {:.4} vs oracle {:.4}",
            max(&q),
            max(expected)
        );
        assert!(
            max(expected) - expected[a] < 1e-2,
            "state {s:?}: action {a} is not optimal"
        );
    }
    let best = select_checkpoint(&out.checkpoints, Selection::BestAccuracy).unwrap();
    assert_eq!(out.checkpoints[best].validation_accuracy, 1.0);
}

#[test]
fn toy_greedy_pathways_diagnose_correctly() {
    let (schema, records) = toy();
    let env = EnvConfig::anemia(&schema);
    let out = drl::train(&schema, &env, &toy_config(0), &records, &records).unwrap();
    let artifact = &out.checkpoints.last().unwrap().artifact;
    let eps = drl::evaluate_policy(artifact, &schema, &env, &records).unwrap();
    for (ep, r) in eps.iter().zip(&records) {
        assert!(ep.actions.contains(&Action::Feature(0)));
        assert_eq!(ep.actions.last(), Some(&Action::Diagnose(r.label)));
    }
    assert_eq!(eps, drl::evaluate_policy(artifact, &schema, &env, &records).unwrap());
}

#[test]
fn same_seed_gives_identical_payloads() {
    let (schema, records) = toy();
    let cfg = TrainConfig {
        total_timesteps: 3_000,
        ..toy_config(11)
    };
    let env = EnvConfig::anemia(&schema);
    let a = drl::train(&schema, &env, &cfg, &records, &records).unwrap();
    let b = drl::train(&schema, &env, &cfg, &records, &records).unwrap();
    assert_eq!(a.checkpoints.len(), b.checkpoints.len());
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(x.artifact.to_bytes().unwrap(), y.artifact.to_bytes().unwrap());
    }
    let c = drl::train(&schema, &env, &TrainConfig { seed: 12, ..cfg }, &records, &records).unwrap();
    assert_ne!(
        a.checkpoints.last().unwrap().artifact.to_bytes().unwrap(),
        c.checkpoints.last().unwrap().artifact.to_bytes().unwrap()
    );
}

#[test]
fn zero_timesteps_returns_initial_checkpoint() {
    let (schema, records) = toy();
    let cfg = TrainConfig {
        total_timesteps: 0,
        ..toy_config(1)
    };
    let out = drl::train(&schema, &EnvConfig::anemia(&schema), &cfg, &records, &records).unwrap();
    assert_eq!(out.checkpoints.len(), 1);
    assert_eq!(out.checkpoints[0].timestep, 0);
    assert_eq!(out.gradient_steps, 0);
}

#[test]
fn learning_starts_and_target_sync_schedule() {
    let (schema, records) = toy();
    let cfg = TrainConfig {
        total_timesteps: 2_000,
        learning_starts: 700,
        train_frequency: 4,
        target_update_interval: 300,
        ..toy_config(2)
    };
    let out = drl::train(&schema, &EnvConfig::anemia(&schema), &cfg, &records, &records).unwrap();
    assert_eq!(out.first_gradient_step, Some(704));
    assert_eq!(out.gradient_steps, (2_000 - 700) / 4);
    assert_eq!(out.target_syncs, 6);
    let steps: Vec<u64> = out.checkpoints.iter().map(|c| c.timestep).collect();
    assert_eq!(steps, vec![0, 666, 1333, 2000]);
}

#[test]
fn invalid_config_is_rejected() {
    let (schema, records) = toy();
    let cfg = TrainConfig {
        gamma: 1.5,
        ..toy_config(0)
    };
    let err = drl::train(&schema, &EnvConfig::anemia(&schema), &cfg, &records, &records).unwrap_err();
    assert!(matches!(err, pathrl_core::Error::Config(_)));
}

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use pathrl_core::drl::{evaluate_policy, train, TrainConfig};
use pathrl_core::env::EnvConfig;
use pathrl_core::harness::EpisodeLog;
use pathrl_core::pathways::{NodeKind, PathwayGraph, GRAPH_SCHEMA};
use pathrl_core::qnet::{Activation, Architecture, Head, Network, PolicyArtifact, TrainingMeta};
use pathrl_core::synthgen::anemia::anemia_dataset;
use pathrl_core::synthgen::{defaults, split, PatientRecord, Schema};
use pathrl_serve::{router, AppState, Store, DEFAULT_TTL};

/// Queries hemoglobin, then gender, and diagnoses No anemia when Hb > 13.
/// A missing hemoglobin turns the next suggestion to ferritin.
fn scripted_policy(schema: &Schema) -> PolicyArtifact {
    let m = schema.n_features();
    let k = schema.n_classes();
    let f = |n: &str| schema.require_feature(n).unwrap();
    let (hb, gender, ferritin) = (f("hemoglobin"), f("gender"), f("ferritin"));
    let no_anemia = schema.require_class("No anemia").unwrap();
    let arch = Architecture {
        inputs: m,
        hidden: vec![4],
        outputs: m + k,
        activation: Activation::Relu,
        head: Head::Plain,
        input_scale: None,
    };
    let mut layers = Network::zeroed(arch.clone()).unwrap().layers().to_vec();
    let (h, o) = layers.split_at_mut(1);
    let (h, o) = (&mut h[0], &mut o[0]);
    // h0 = relu(-hb), h1 = relu(-gender), h2 = relu(hb - 13), h3 = relu(-hb - 1.5)
    h.weights[hb] = -1.0;
    h.weights[m + gender] = -1.0;
    h.weights[2 * m + hb] = 1.0;
    h.bias[2] = -13.0;
    h.weights[3 * m + hb] = -1.0;
    h.bias[3] = -1.5;
    let w = |o: &mut pathrl_core::qnet::Dense, out: usize, hid: usize, v: f64| o.weights[out * 4 + hid] = v;
    w(o, hb, 0, 3.0);
    w(o, hb, 3, -10.0);
    w(o, gender, 1, 2.0);
    w(o, ferritin, 3, 10.0);
    w(o, m + no_anemia, 2, 1.0);
    w(o, m + no_anemia, 1, -2.0);
    let net = Network::from_layers(arch, layers).unwrap();
    PolicyArtifact::new(net, schema, None, Some(m + 1), TrainingMeta::default())
}

fn trained_policy(schema: &Schema) -> (PolicyArtifact, Vec<PatientRecord>) {
    let data = anemia_dataset(1500, schema, &defaults::anemia_tree(schema), 5).unwrap();
    let parts = split(&data, 5);
    let cfg = TrainConfig {
        total_timesteps: 6000,
        learning_starts: 1000,
        target_update_interval: 500,
        learning_rate: 1e-3,
        checkpoints: 1,
        dueling: true,
        seed: 5,
        ..Default::default()
    };
    let env = EnvConfig::anemia(schema);
    let out = train(schema, &env, &cfg, &parts.train, &parts.validation).unwrap();
    (out.checkpoints.last().unwrap().artifact.clone(), parts.test)
}

fn app(dir: &Path, ttl: Duration) -> axum::Router {
    router(AppState::load(dir, ttl).unwrap())
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_owned())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn start(app: &axum::Router, policy: &str) -> Value {
    let (status, v) = call(
        app,
        "POST",
        "/sessions",
        Some(&json!({ "policy_id": policy }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v
}

async fn observe(app: &axum::Router, id: &str, value: Value) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/sessions/{id}/observe"),
        Some(&json!({ "value": value }).to_string()),
    )
    .await
}

fn scripted_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    scripted_policy(&defaults::anemia_schema())
        .save(&dir.path().join("scripted.policy"))
        .unwrap();
    dir
}

#[tokio::test]
async fn no_anemia_inputs_reach_diagnosis() {
    let dir = scripted_dir();
    let app = app(dir.path(), DEFAULT_TTL);
    let s = start(&app, "scripted").await;
    assert_eq!(s["schema"], "session/1");
    assert_eq!(s["status"], "active");
    assert_eq!(s["suggestion"]["kind"], "feature");
    assert_eq!(s["suggestion"]["name"], "hemoglobin");
    let id = s["session_id"].as_str().unwrap();

    let (status, s) = observe(&app, id, json!(14.5)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["suggestion"]["name"], "gender");
    let (_, s) = observe(&app, id, json!(0)).await;
    assert_eq!(s["status"], "diagnosed");
    assert_eq!(s["diagnosis"]["name"], "No anemia");
    assert!(s.get("suggestion").is_none());
    let history = s["history"].as_array().unwrap();
    let depth = defaults::anemia_tree(&defaults::anemia_schema()).depth();
    assert!(history.len() <= depth + 1);
    assert_eq!(history[0]["value"], 14.5);
    let scores = s["q_scores"].as_array().unwrap();
    assert_eq!(scores.len(), 8);
    let total: f64 = scores.iter().map(|c| c["score"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let (status, err) = observe(&app, id, json!(1)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["schema"], "error/1");
}

#[tokio::test]
async fn missing_value_keeps_sentinel_and_moves_on() {
    let dir = scripted_dir();
    let app = app(dir.path(), DEFAULT_TTL);
    let s = start(&app, "scripted").await;
    let id = s["session_id"].as_str().unwrap();
    let (status, s) = observe(&app, id, json!("missing")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["status"], "active");
    assert_eq!(s["suggestion"]["name"], "ferritin");
    assert_eq!(s["history"][0]["value"], "missing");
    let hb = defaults::anemia_schema().require_feature("hemoglobin").unwrap();
    assert_eq!(s["observation"][hb], -1.0);
}

#[tokio::test]
async fn request_errors() {
    let dir = scripted_dir();
    let app = app(dir.path(), DEFAULT_TTL);
    let (status, _) = call(&app, "POST", "/sessions", Some(r#"{"policy_id":"nope"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for body in ["{", r#"{"policy":"scripted"}"#, ""] {
        let (status, v) = call(&app, "POST", "/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["error"], "bad_request");
    }
    let s = start(&app, "scripted").await;
    let id = s["session_id"].as_str().unwrap();
    let (status, v) = observe(&app, id, json!(99.0)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "out_of_range");
    let (status, _) = observe(&app, id, json!("unknown")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // rejected values leave the session untouched
    let (status, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["history"].as_array().unwrap().len(), 0);
    let (status, _) = observe(&app, "no-such-session", json!(1)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let dir = scripted_dir();
    let app = app(dir.path(), DEFAULT_TTL);
    let a = start(&app, "scripted").await;
    let b = start(&app, "scripted").await;
    let (ia, ib) = (a["session_id"].as_str().unwrap(), b["session_id"].as_str().unwrap());
    assert_ne!(ia, ib);
    observe(&app, ia, json!(14.5)).await;
    observe(&app, ib, json!("missing")).await;
    let (_, a) = observe(&app, ia, json!(1)).await;
    let (_, b) = call(&app, "GET", &format!("/sessions/{ib}"), None).await;
    assert_eq!(a["status"], "diagnosed");
    assert_eq!(b["status"], "active");
    assert_eq!(b["suggestion"]["name"], "ferritin");
    assert_eq!(a["history"][0]["value"], 14.5);
    assert_eq!(b["history"][0]["value"], "missing");
}

#[tokio::test]
async fn idle_sessions_expire() {
    let dir = scripted_dir();
    let app = app(dir.path(), Duration::from_millis(50));
    let s = start(&app, "scripted").await;
    let id = s["session_id"].as_str().unwrap();
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, v) = observe(&app, id, json!(14.5)).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(v["error"], "session_expired");
}

#[tokio::test]
async fn policies_and_pathways() {
    let empty = tempfile::tempdir().unwrap();
    let (status, v) = call(&app(empty.path(), DEFAULT_TTL), "GET", "/policies", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({ "schema": "policies/1", "policies": [] }));

    let schema = defaults::anemia_schema();
    let (artifact, test) = trained_policy(&schema);
    let dir = tempfile::tempdir().unwrap();
    artifact.save(&dir.path().join("best.policy")).unwrap();
    let episodes = evaluate_policy(&artifact, &schema, &EnvConfig::anemia(&schema), &test).unwrap();
    EpisodeLog::new(&schema, episodes)
        .save(&dir.path().join("best.episodes.json"))
        .unwrap();
    scripted_policy(&schema)
        .save(&dir.path().join("scripted.policy"))
        .unwrap();
    let app = app(dir.path(), DEFAULT_TTL);

    let (_, v) = call(&app, "GET", "/policies", None).await;
    let list = v["policies"].as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["policy_id"], "best");
    assert_eq!(list[0]["has_pathways"], true);
    assert_eq!(list[1]["has_pathways"], false);

    let (status, g) = call(&app, "GET", "/pathways/best", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(g["schema"], GRAPH_SCHEMA);
    let graph: PathwayGraph = serde_json::from_value(g).unwrap();
    graph.check_conservation().unwrap();

    let (_, g) = call(&app, "GET", "/pathways/best?top_k=3", None).await;
    let graph: PathwayGraph = serde_json::from_value(g).unwrap();
    graph.check_conservation().unwrap();
    let (_, g) = call(&app, "GET", "/pathways/best?classes=No%20anemia,0&top_k=1", None).await;
    let graph: PathwayGraph = serde_json::from_value(g).unwrap();
    let allowed = ["No anemia", schema.classes[0].as_str()];
    for n in graph.nodes.iter().filter(|n| n.kind == NodeKind::Diagnosis) {
        assert!(allowed.contains(&n.label.as_str()), "{}", n.label);
    }

    let (status, _) = call(&app, "GET", "/pathways/scripted", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/pathways/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/pathways/best?classes=Scurvy", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/pathways/best?top_k=x", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

/// Feeds each record's values through the API and compares with offline
/// greedy rollouts.
#[tokio::test]
async fn served_sessions_replay_offline_episodes() {
    let schema = defaults::anemia_schema();
    let (artifact, test) = trained_policy(&schema);
    let dir = tempfile::tempdir().unwrap();
    artifact.save(&dir.path().join("p.policy")).unwrap();
    let offline = evaluate_policy(&artifact, &schema, &EnvConfig::anemia(&schema), &test[..100]).unwrap();
    let store = Store::load(dir.path()).unwrap();
    let app = router(AppState::new(store, DEFAULT_TTL));
    for (record, episode) in test.iter().zip(&offline) {
        let mut s = start(&app, "p").await;
        let id = s["session_id"].as_str().unwrap().to_owned();
        while s["status"] == "active" {
            let j = s["suggestion"]["index"].as_u64().unwrap() as usize;
            let value = record.get(j).map_or(json!("missing"), |v| json!(v));
            let (status, next) = observe(&app, &id, value).await;
            assert_eq!(status, StatusCode::OK);
            s = next;
        }
        let served: Vec<String> = s["history"]
            .as_array()
            .unwrap()
            .iter()
            .map(|h| format!("{}:{}", h["action"]["kind"].as_str().unwrap(), h["action"]["index"]))
            .collect();
        let expected: Vec<String> = episode
            .actions
            .iter()
            .map(|a| match a {
                pathrl_core::env::Action::Feature(j) => format!("feature:{j}"),
                pathrl_core::env::Action::Diagnose(c) => format!("diagnosis:{c}"),
            })
            .collect();
        assert_eq!(served, expected);
        assert_eq!(s["diagnosis"]["index"].as_u64().map(|c| c as usize), episode.prediction);
    }
}

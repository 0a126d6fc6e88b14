//! HTTP session service over trained policies.
//!
//! `POST /sessions` starts a diagnosis session, `POST /sessions/{id}/observe`
//! supplies the value of the suggested test, `GET /policies` lists the loaded
//! policies and `GET /pathways/{policy_id}` returns an aggregated pathway graph.

pub mod session;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use pathrl_core::harness::EpisodeLog;
use pathrl_core::pathways::{aggregate, extract, GraphFilter};

pub use session::{Session, SessionError, SessionView, Status};
pub use store::{Policy, PolicyInfo, Store};

pub const POLICIES_SCHEMA: &str = "policies/1";
pub const ERROR_SCHEMA: &str = "error/1";
pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

type Shared = Arc<tokio::sync::Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    store: Arc<Store>,
    sessions: Arc<Mutex<HashMap<String, Shared>>>,
    ttl: Duration,
}

impl AppState {
    pub fn new(store: Store, ttl: Duration) -> Self {
        Self {
            store: Arc::new(store),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            ttl,
        }
    }

    pub fn load(dir: &Path, ttl: Duration) -> pathrl_core::Result<Self> {
        Ok(Self::new(Store::load(dir)?, ttl))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))
    }

    fn policy(&self, id: &str) -> Result<&Policy, ApiError> {
        self.store
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_policy", format!("no policy `{id}`")))
    }

    /// Drops sessions idle for more than ten expiry periods.
    fn prune(&self) {
        let horizon = self.ttl * 10;
        self.sessions
            .lock()
            .expect("session table lock")
            .retain(|_, s| s.try_lock().map_or(true, |s| s.last_seen.elapsed() <= horizon));
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    schema: &'static str,
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Inactive(_) => Self::new(StatusCode::CONFLICT, "session_inactive", e.to_string()),
            SessionError::OutOfRange(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_range", e.to_string()),
            SessionError::Core(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema: ERROR_SCHEMA,
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    policy_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ValueField {
    Number(f64),
    Word(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObserveBody {
    value: ValueField,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateBody = parse_body(&body)?;
    let policy = state.policy(&req.policy_id)?;
    state.prune();
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::start(id.clone(), policy)?;
    let view = session.view(policy);
    state
        .sessions
        .lock()
        .expect("session table lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn with_session<F>(state: &AppState, id: &str, f: F) -> Result<SessionView, ApiError>
where
    F: FnOnce(&mut Session, &Policy) -> Result<(), ApiError>,
{
    let shared = state.session(id)?;
    let mut session = shared.lock().await;
    if session.last_seen.elapsed() > state.ttl {
        return Err(ApiError::new(
            StatusCode::GONE,
            "session_expired",
            format!("session `{id}` expired"),
        ));
    }
    let policy = state.policy(&session.policy_id.clone())?;
    f(&mut session, policy)?;
    session.last_seen = Instant::now();
    Ok(session.view(policy))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |_, _| Ok(())).await.map(Json)
}

async fn observe(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let req: ObserveBody = parse_body(&body)?;
    let value = match req.value {
        ValueField::Number(v) => Some(v),
        ValueField::Word(w) if w == "missing" => None,
        ValueField::Word(w) => {
            return Err(ApiError::bad_request(format!(
                "value must be a number or \"missing\", got `{w}`"
            )))
        }
    };
    with_session(&state, &id, |s, p| s.observe(p, value).map_err(ApiError::from))
        .await
        .map(Json)
}

#[derive(Debug, Serialize)]
struct PolicyList {
    schema: &'static str,
    policies: Vec<PolicyInfo>,
}

async fn list_policies(State(state): State<AppState>) -> Json<PolicyList> {
    Json(PolicyList {
        schema: POLICIES_SCHEMA,
        policies: state.store.list(),
    })
}

#[derive(Debug, Deserialize)]
struct GraphQuery {
    classes: Option<String>,
    top_k: Option<String>,
}

async fn pathways(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<GraphQuery>,
) -> Result<Response, ApiError> {
    let policy = state.policy(&id)?;
    let path = policy.episodes.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "no_pathways",
            format!("no episodes stored for `{id}`"),
        )
    })?;
    let schema = &policy.schema;
    let classes = match q.classes.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|c| {
                    let c = c.trim();
                    schema
                        .class_index(c)
                        .or_else(|| c.parse().ok().filter(|&i: &usize| i < schema.n_classes()))
                        .ok_or_else(|| ApiError::bad_request(format!("unknown class `{c}`")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let top_k = match q.top_k.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(k) => Some(
            k.parse::<usize>()
                .map_err(|_| ApiError::bad_request(format!("bad top_k `{k}`")))?,
        ),
    };
    let log = EpisodeLog::load(path)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let filter = GraphFilter {
        classes,
        top_k,
        collapse_depth: false,
    };
    let graph = aggregate(&extract(&log.episodes), schema, &filter);
    Ok(Json(graph).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/observe", post(observe))
        .route("/policies", get(list_policies))
        .route("/pathways/{policy_id}", get(pathways))
        .with_state(state)
}

/// Serves `state` on `addr` until the process stops.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

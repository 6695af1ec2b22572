//! HTTP session service: plans and renders scenes from a checkpoint and
//! applies per-object edits (latent moves, additions, deletions), each
//! session replayable from its edit log.

pub mod session;

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use gf2_core::model::{Generator, Which};
use gf2_core::Error;
use session::{payload, replay, Edit, EditLog, Mode, Session};

/// Live sessions kept in memory; the least recently used is evicted beyond this.
pub const SESSION_CAP: usize = 32;

/// Published schema of scene responses.
pub const SCENE_SCHEMA: &str = include_str!("../schema/scene.json");

const UI_PAGE: &str = include_str!("../ui/index.html");

/// An error response with a JSON body `{"error": …}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::IndexOutOfRange { .. } => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::CountMismatch { .. } | Error::EmptyScene | Error::EmptySegmentList => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::MissingCheckpoint(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

type SharedSession = Arc<tokio::sync::Mutex<Session>>;

#[derive(Default)]
struct Sessions {
    map: HashMap<String, SharedSession>,
    order: VecDeque<String>,
    next: u64,
}

impl Sessions {
    fn touch(&mut self, id: &str) {
        if let Some(pos) = self.order.iter().position(|k| k == id) {
            let k = self.order.remove(pos).expect("position in range");
            self.order.push_back(k);
        }
    }

    fn insert(&mut self, id: String, s: SharedSession) {
        self.map.insert(id.clone(), s);
        self.order.push_back(id);
        while self.order.len() > SESSION_CAP {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
    }
}

/// Shared service state: the checkpoint directory, loaded generators and sessions.
pub struct AppState {
    checkpoints: PathBuf,
    generators: Mutex<HashMap<String, Arc<Generator<f32>>>>,
    sessions: Mutex<Sessions>,
}

impl AppState {
    /// Serves checkpoints `<dir>/<name>.gf2c` under the name `<name>`.
    pub fn new(checkpoints: PathBuf) -> Arc<Self> {
        Arc::new(Self { checkpoints, generators: Mutex::default(), sessions: Mutex::default() })
    }

    fn generator(&self, name: &str) -> ApiResult<Arc<Generator<f32>>> {
        let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !name.starts_with('.');
        if !valid {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint {name:?}")));
        }
        if let Some(g) = self.generators.lock().expect("generator cache").get(name) {
            return Ok(g.clone());
        }
        let path = self.checkpoints.join(format!("{name}.gf2c"));
        if !path.is_file() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint {name:?}")));
        }
        let g = Arc::new(Generator::<f32>::load(&path)?);
        self.generators.lock().expect("generator cache").insert(name.to_string(), g.clone());
        Ok(g)
    }

    fn session(&self, id: &str) -> ApiResult<SharedSession> {
        let mut sessions = self.sessions.lock().expect("session table");
        let s = sessions.map.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))?;
        sessions.touch(id);
        Ok(s)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").map.len()
    }
}

/// All routes.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/schema", get(|| async { Json(json!({ "schemas": ["scene.json"] })) }))
        .route("/schema/scene.json", get(schema))
        .route("/ui", get(|| async { Html(UI_PAGE) }))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/segments", post(add))
        .route("/sessions/{id}/segments/{i}", axum::routing::delete(delete))
        .route("/sessions/{id}/segments/{i}/edit", post(edit))
        .route("/replay", post(replay_log))
        .with_state(state)
}

async fn schema() -> Response {
    ([(axum::http::header::CONTENT_TYPE, "application/schema+json")], SCENE_SCHEMA).into_response()
}

fn body<T: for<'de> Deserialize<'de>>(v: Value) -> ApiResult<T> {
    serde_json::from_value(v).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

fn scene_response(s: &Session) -> Value {
    json!({ "session_id": s.id, "revision": s.revision, "scene": payload(&s.scene) })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    checkpoint: String,
    seed: u64,
}

async fn create(State(state): State<Arc<AppState>>, Json(raw): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateBody = body(raw)?;
    let st = state.clone();
    let session = blocking(move || {
        let generator = st.generator(&req.checkpoint)?;
        let scene = generator.scene(req.seed)?;
        let log = EditLog { checkpoint: req.checkpoint, seed: req.seed, edits: Vec::new() };
        Ok(Session { id: String::new(), generator, scene, revision: 0, log })
    })
    .await?;
    let mut sessions = state.sessions.lock().expect("session table");
    sessions.next += 1;
    let id = format!("s{}", sessions.next);
    let session = Session { id: id.clone(), ..session };
    let response = scene_response(&session);
    sessions.insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(response)))
}

async fn show(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = state.session(&id)?;
    let guard = s.try_lock().map_err(|_| busy())?;
    Ok(Json(scene_response(&guard)))
}

async fn log(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<EditLog>> {
    let s = state.session(&id)?;
    let guard = s.try_lock().map_err(|_| busy())?;
    Ok(Json(guard.log.clone()))
}

fn busy() -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "a render is in flight for this session")
}

/// Runs `edit` on the session exclusively; a concurrent request or a stale
/// `revision` gets 409.
async fn mutate(state: Arc<AppState>, id: String, revision: Option<u64>, edit: Edit) -> ApiResult<Json<Value>> {
    let s = state.session(&id)?;
    let mut guard = s.try_lock_owned().map_err(|_| busy())?;
    if let Some(r) = revision.filter(|&r| r != guard.revision) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("stale revision {r}, current is {}", guard.revision)));
    }
    blocking(move || {
        guard.edit(edit)?;
        Ok(Json(scene_response(&guard)))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    which: Which,
    #[serde(default)]
    mode: Mode,
    #[serde(default = "one")]
    t: f64,
    #[serde(default)]
    seed: u64,
    revision: Option<u64>,
}

fn one() -> f64 {
    1.0
}

async fn edit(State(state): State<Arc<AppState>>, Path((id, i)): Path<(String, usize)>, Json(raw): Json<Value>) -> ApiResult<Json<Value>> {
    let req: EditBody = body(raw)?;
    if !(0.0..=1.0).contains(&req.t) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("t = {} outside [0, 1]", req.t)));
    }
    mutate(state, id, req.revision, Edit::Latent { segment: i, which: req.which, mode: req.mode, t: req.t, seed: req.seed }).await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AddBody {
    #[serde(default)]
    seed: u64,
    revision: Option<u64>,
}

async fn add(State(state): State<Arc<AppState>>, Path(id): Path<String>, raw: Option<Json<Value>>) -> ApiResult<Json<Value>> {
    let req: AddBody = match raw {
        Some(Json(v)) => body(v)?,
        None => AddBody::default(),
    };
    mutate(state, id, req.revision, Edit::Add { seed: req.seed }).await
}

async fn delete(State(state): State<Arc<AppState>>, Path((id, i)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    mutate(state, id, None, Edit::Delete { segment: i }).await
}

async fn replay_log(State(state): State<Arc<AppState>>, Json(raw): Json<Value>) -> ApiResult<Json<Value>> {
    let log: EditLog = body(raw)?;
    let scene = blocking(move || {
        let g = state.generator(&log.checkpoint)?;
        Ok(replay(&g, log.seed, &log.edits)?)
    })
    .await?;
    Ok(Json(json!({ "scene": payload(&scene) })))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, checkpoints: PathBuf) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(checkpoints))).await
}

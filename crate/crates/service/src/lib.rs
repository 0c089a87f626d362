//! HTTP API over the dialogue engine.
//!
//! Definitions are uploaded (or loaded from a directory at start-up) into an
//! in-memory registry; each upload gets a fresh version id. Sessions run one
//! message at a time and publish their events on a server-sent-events
//! stream that first replays the transcript and then follows it live.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/automata` | body: definition text |
//! | GET | `/automata` | |
//! | GET | `/automata/{id}/graph` | nodes, edges, priorities, attachments |
//! | POST | `/sessions` | `{"automaton_id": .., "seed": ..}` |
//! | POST | `/sessions/{id}/message` | `{"text": ..}` |
//! | GET | `/sessions/{id}` | |
//! | GET | `/sessions/{id}/events` | SSE; honours `Last-Event-ID` |
//! | GET | `/sessions/{id}/transcript` | JSON lines |

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Notify;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use mfa_core::backends::BackendEnv;
use mfa_core::dsl::{self, DefinitionSource, ParseError};
use mfa_core::runner::{displayed, transcript_jsonl, Event, RunError, Session, Status};
use mfa_core::{Automaton, StateId, ValidationReport};

#[derive(Clone, Default)]
pub struct ServiceConfig {
    /// Required `Authorization: Bearer` token, if any.
    pub token: Option<String>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    /// Backend settings shared by all sessions (transport, sink directory).
    pub backend: BackendEnv,
    /// Where relative paths in uploaded definitions resolve.
    pub upload_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AutomatonInfo {
    pub automaton_id: String,
    pub name: String,
    pub version: usize,
    pub states: usize,
    pub edges: usize,
    pub report: ValidationReport,
}

struct Stored {
    info: AutomatonInfo,
    automaton: Arc<Automaton>,
}

#[derive(Debug)]
pub enum RegisterError {
    Parse(Vec<ParseError>),
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionHandle {
    pub session_id: String,
    pub automaton_id: String,
    pub automaton: String,
    pub status: Status,
    pub current: StateId,
    pub awaiting_user: bool,
    pub seed: u64,
}

struct Hub {
    events: Vec<Event>,
    handle: SessionHandle,
}

impl Hub {
    fn closed(&self) -> bool {
        matches!(self.handle.status, Status::Ended | Status::Error)
    }
}

struct SessionSlot {
    session: Mutex<Session>,
    hub: Mutex<Hub>,
    notify: Notify,
}

impl SessionSlot {
    fn refresh(&self, session: &Session) {
        let mut hub = self.hub.lock().unwrap();
        hub.handle.status = session.status();
        hub.handle.current = session.current().clone();
        hub.handle.awaiting_user = session.awaiting_user();
        drop(hub);
        self.notify.notify_waiters();
    }

    fn handle(&self) -> SessionHandle {
        self.hub.lock().unwrap().handle.clone()
    }
}

pub struct AppState {
    config: ServiceConfig,
    registry: RwLock<Vec<Stored>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect();
    if s.is_empty() {
        "automaton".into()
    } else {
        s
    }
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            registry: RwLock::new(Vec::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    /// Parses, validates and stores a definition under a new version id.
    pub fn register(
        &self,
        text: &str,
        base_dir: Option<&Path>,
    ) -> Result<AutomatonInfo, RegisterError> {
        let mut automaton = dsl::parse(text).map_err(RegisterError::Parse)?;
        if let Some(dir) = base_dir.or(self.config.upload_dir.as_deref()) {
            automaton.set_base_dir(dir);
        }
        let report = automaton.validate();
        if !report.is_ok() {
            return Err(RegisterError::Invalid(report));
        }
        let mut registry = self.registry.write().unwrap();
        let name = automaton.name().to_owned();
        let version = 1 + registry.iter().filter(|s| s.info.name == name).count();
        let info = AutomatonInfo {
            automaton_id: format!("{}-v{version}", slug(&name)),
            name,
            version,
            states: automaton.state_count(),
            edges: automaton.edges().len(),
            report,
        };
        registry.push(Stored {
            info: info.clone(),
            automaton: Arc::new(automaton),
        });
        Ok(info)
    }

    /// Registers every `.mfa` file below `dir`. Files that fail to load are
    /// logged and skipped.
    pub fn load_dir(&self, dir: &Path) -> std::io::Result<Vec<AutomatonInfo>> {
        let mut files = Vec::new();
        collect_mfa(dir, &mut files)?;
        files.sort();
        let mut out = Vec::new();
        for file in files {
            let source = match DefinitionSource::read(&file) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("{e}");
                    continue;
                }
            };
            match self.register(&source.text, file.parent()) {
                Ok(info) => {
                    log::info!("loaded {} as {}", file.display(), info.automaton_id);
                    out.push(info);
                }
                Err(RegisterError::Parse(errs)) => {
                    for e in errs {
                        log::warn!("{}", source.render(&e));
                    }
                }
                Err(RegisterError::Invalid(report)) => {
                    for e in report.errors {
                        log::warn!("{}: {e}", file.display());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn automata(&self) -> Vec<AutomatonInfo> {
        self.registry
            .read()
            .unwrap()
            .iter()
            .map(|s| s.info.clone())
            .collect()
    }

    fn automaton(&self, id: &str) -> Option<(AutomatonInfo, Arc<Automaton>)> {
        self.registry
            .read()
            .unwrap()
            .iter()
            .find(|s| s.info.automaton_id == id)
            .map(|s| (s.info.clone(), s.automaton.clone()))
    }

    fn slot(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.read().unwrap().get(id).cloned()
    }
}

fn collect_mfa(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_mfa(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "mfa") {
            out.push(path);
        }
    }
    Ok(())
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> ApiError {
    ApiError(
        status,
        json!({ "error": { "code": code, "message": message.into() } }),
    )
}

fn run_error(err: &RunError) -> ApiError {
    let status = match err {
        RunError::Ended => StatusCode::GONE,
        RunError::NotAwaitingUser | RunError::AwaitingUser => StatusCode::CONFLICT,
        RunError::Backend { .. } | RunError::Trigger { .. } => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, err.code(), err.to_string())
}

async fn upload(State(app): State<Arc<AppState>>, body: String) -> Result<Response, ApiError> {
    match app.register(&body, None) {
        Ok(info) => Ok((StatusCode::CREATED, Json(info)).into_response()),
        Err(RegisterError::Parse(errors)) => Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "parse_errors": errors }),
        )),
        Err(RegisterError::Invalid(report)) => Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "report": report }),
        )),
    }
}

async fn list_automata(State(app): State<Arc<AppState>>) -> Json<Vec<AutomatonInfo>> {
    Json(app.automata())
}

/// Structure only; backend parameters are never exposed.
pub fn graph_json(id: &str, a: &Automaton) -> serde_json::Value {
    let attachment = |h: &[mfa_core::HistoryBinding]| {
        h.first()
            .map(|b| json!({ "archive": b.archive, "mode": b.mode.as_str() }))
    };
    let nodes: Vec<_> = a
        .states()
        .map(|s| {
            json!({
                "id": s.id,
                "kind": s.kind.as_str(),
                "final": s.is_final,
                "display": s.is_machine().then(|| s.display_policy().as_str()),
                "history": attachment(&s.history),
            })
        })
        .collect();
    let edges: Vec<_> = a
        .edges()
        .iter()
        .map(|e| {
            json!({
                "id": e.id(),
                "from": e.from,
                "to": e.to,
                "triggers": e.triggers,
                "priority": a.effective_priority(e),
            })
        })
        .collect();
    let triggers: Vec<_> = a
        .triggers()
        .map(|t| {
            json!({
                "id": t.id,
                "kind": t.kind.as_str(),
                "priority": t.get_priority(),
                "history": attachment(&t.history),
            })
        })
        .collect();
    json!({
        "automaton_id": id,
        "name": a.name(),
        "initial": a.initial(),
        "nodes": nodes,
        "edges": edges,
        "triggers": triggers,
        "archives": a.archives().collect::<Vec<_>>(),
    })
}

async fn graph(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let (_, a) = app.automaton(&id).ok_or_else(|| {
        error(
            StatusCode::NOT_FOUND,
            "NOT_FOUND",
            format!("no automaton `{id}`"),
        )
    })?;
    Ok(Json(graph_json(&id, &a)))
}

#[derive(Deserialize)]
struct NewSession {
    automaton_id: String,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TurnResponse {
    displayed: Vec<String>,
    handle: SessionHandle,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<NewSession>,
) -> Result<Response, ApiError> {
    let (info, automaton) = app.automaton(&req.automaton_id).ok_or_else(|| {
        error(
            StatusCode::NOT_FOUND,
            "NOT_FOUND",
            format!("no automaton `{}`", req.automaton_id),
        )
    })?;
    let session_id = uuid::Uuid::new_v4().to_string();
    let seed = req
        .seed
        .unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
    let app2 = app.clone();
    let sid = session_id.clone();
    let result = tokio::task::spawn_blocking(
        move || -> Result<(Arc<SessionSlot>, Vec<Event>), ApiError> {
            let mut session = Session::builder(automaton)
                .id(sid.clone())
                .seed(seed)
                .env(app2.config.backend.clone())
                .start()
                .map_err(|e| run_error(&e))?;
            let handle = SessionHandle {
                session_id: sid.clone(),
                automaton_id: info.automaton_id.clone(),
                automaton: info.name.clone(),
                status: session.status(),
                current: session.current().clone(),
                awaiting_user: session.awaiting_user(),
                seed,
            };
            let slot = Arc::new_cyclic(|weak: &std::sync::Weak<SessionSlot>| {
                let weak = weak.clone();
                session.subscribe(move |event| {
                    if let Some(slot) = weak.upgrade() {
                        slot.hub.lock().unwrap().events.push(event.clone());
                        slot.notify.notify_waiters();
                    }
                });
                SessionSlot {
                    session: Mutex::new(session),
                    hub: Mutex::new(Hub {
                        events: Vec::new(),
                        handle,
                    }),
                    notify: Notify::new(),
                }
            });
            app2.sessions.write().unwrap().insert(sid, slot.clone());
            // a machine initial state runs straight away
            let mut session = slot.session.lock().unwrap();
            let events = if session.status() == Status::Running {
                let r = session.step(None);
                slot.refresh(&session);
                r.map_err(|e| run_error(&e))?
            } else {
                Vec::new()
            };
            drop(session);
            Ok((slot, events))
        },
    )
    .await
    .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
    let (slot, events) = result?;
    Ok((
        StatusCode::CREATED,
        Json(TurnResponse {
            displayed: displayed(&events),
            handle: slot.handle(),
        }),
    )
        .into_response())
}

fn find_slot(app: &AppState, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
    app.slot(id).ok_or_else(|| {
        error(
            StatusCode::NOT_FOUND,
            "NOT_FOUND",
            format!("no session `{id}`"),
        )
    })
}

#[derive(Deserialize)]
struct Message {
    text: String,
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(msg): Json<Message>,
) -> Result<Json<TurnResponse>, ApiError> {
    let slot = find_slot(&app, &id)?;
    if slot.hub.lock().unwrap().closed() {
        return Err(run_error(&RunError::Ended));
    }
    let slot2 = slot.clone();
    let events = tokio::task::spawn_blocking(move || {
        let Ok(mut session) = slot2.session.try_lock() else {
            return Err(error(
                StatusCode::CONFLICT,
                "BUSY",
                "another message is being processed",
            ));
        };
        let r = session.step(Some(&msg.text));
        slot2.refresh(&session);
        r.map_err(|e| run_error(&e))
    })
    .await
    .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))??;
    Ok(Json(TurnResponse {
        displayed: displayed(&events),
        handle: slot.handle(),
    }))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionHandle>, ApiError> {
    Ok(Json(find_slot(&app, &id)?.handle()))
}

async fn transcript(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let slot = find_slot(&app, &id)?;
    let body = transcript_jsonl(&slot.hub.lock().unwrap().events);
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Deserialize)]
struct StreamQuery {
    /// Resume after this seq (same as `Last-Event-ID`).
    after: Option<u64>,
}

/// Replays the transcript and then follows it until the session ends.
fn event_stream(
    slot: Arc<SessionSlot>,
    start: usize,
) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    futures::stream::unfold(
        (slot, start, Vec::<Event>::new()),
        |(slot, mut next, mut queue)| async move {
            loop {
                if !queue.is_empty() {
                    let event = queue.remove(0);
                    let sse = SseEvent::default()
                        .id(event.seq.to_string())
                        .data(event.to_json());
                    return Some((Ok(sse), (slot, next, queue)));
                }
                let notified = slot.notify.notified();
                tokio::pin!(notified);
                notified.as_mut().enable();
                let closed = {
                    let hub = slot.hub.lock().unwrap();
                    if next < hub.events.len() {
                        queue.extend_from_slice(&hub.events[next..]);
                        next = hub.events.len();
                        false
                    } else {
                        hub.closed()
                    }
                };
                if !queue.is_empty() {
                    continue;
                }
                if closed {
                    return None;
                }
                notified.await;
            }
        },
    )
}

async fn events(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let slot = find_slot(&app, &id)?;
    let last = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .or(q.after);
    let start = last.map_or(0, |s| s as usize + 1);
    Ok(Sse::new(event_stream(slot, start)).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn require_token(
    State(app): State<Arc<AppState>>,
    Query(q): Query<TokenQuery>,
    req: Request,
    next: Next,
) -> Response {
    let Some(expected) = &app.config.token else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // EventSource cannot set headers, hence the query parameter
    if bearer == Some(expected.as_str()) || q.token.as_deref() == Some(expected.as_str()) {
        next.run(req).await
    } else {
        error(
            StatusCode::UNAUTHORIZED,
            "UNAUTHORIZED",
            "missing or wrong bearer token",
        )
        .into_response()
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    let origin = match app.config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(v)) => AllowOrigin::exact(v),
        _ => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([
            header::CONTENT_TYPE,
            header::AUTHORIZATION,
            "last-event-id".parse().unwrap(),
        ]);
    Router::new()
        .route("/automata", post(upload).get(list_automata))
        .route("/automata/{id}/graph", get(graph))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/transcript", get(transcript))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .layer(cors)
        .with_state(app)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, app).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}

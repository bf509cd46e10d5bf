//! HTTP control API and event stream.
//!
//! ```text
//! GET  /api/runs
//! GET  /api/runs/{id}
//! GET  /api/runs/{id}/tree
//! GET  /api/runs/{id}/candidates/{cid}
//! GET  /api/runs/{id}/events            server-sent events, data = RunEvent JSON
//! POST /api/runs/{id}/hints             {"text": "..."}
//! POST /api/runs/{id}/pause
//! POST /api/runs/{id}/resume
//! POST /api/runs/{id}/rollback          {"candidate": 12}
//! POST /api/runs/{id}/lock              {"region": 0}
//! ```
//!
//! Accepted writes answer 202 and take effect at the start of the next
//! iteration, where the matching event is logged.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot, watch};
use tokio_stream::wrappers::ReceiverStream;

use crate::candidate::CandidateId;
use crate::control::{Command, LiveRun, Rejected};
use crate::events::{EventBody, Node, Origin, Phase, RunReport};
use crate::patch::PatchKind;
use crate::store::{StoreError, StoredRun, EVENTS_FILE};

struct Entry {
    live: Arc<LiveRun>,
    tick: watch::Sender<u64>,
}

#[derive(Default)]
pub struct Registry {
    runs: RwLock<BTreeMap<String, Entry>>,
}

impl Registry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add(&self, live: Arc<LiveRun>) {
        let (tick, _) = watch::channel(0);
        let notify = tick.clone();
        live.on_event(move |n| {
            notify.send_replace(n);
        });
        self.runs
            .write()
            .expect("registry lock poisoned")
            .insert(live.id().to_string(), Entry { live, tick });
    }

    /// Registers a stored run directory, or every run directory directly
    /// inside `path`. Run ids are directory names.
    pub fn add_stored(&self, path: &Path) -> Result<usize, StoreError> {
        let name = |p: &Path| {
            p.file_name()
                .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
        };
        if path.join(EVENTS_FILE).is_file() {
            self.add(LiveRun::stored(&name(path), StoredRun::load(path)?));
            return Ok(1);
        }
        let mut dirs: Vec<_> = std::fs::read_dir(path)
            .map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(EVENTS_FILE).is_file())
            .collect();
        dirs.sort();
        for d in &dirs {
            self.add(LiveRun::stored(&name(d), StoredRun::load(d)?));
        }
        Ok(dirs.len())
    }

    fn get(&self, id: &str) -> Result<(Arc<LiveRun>, watch::Receiver<u64>), ApiError> {
        let runs = self.runs.read().expect("registry lock poisoned");
        let e = runs
            .get(id)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown run `{id}`")))?;
        Ok((Arc::clone(&e.live), e.tick.subscribe()))
    }

    fn all(&self) -> Vec<Arc<LiveRun>> {
        self.runs
            .read()
            .expect("registry lock poisoned")
            .values()
            .map(|e| Arc::clone(&e.live))
            .collect()
    }
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Rejected> for ApiError {
    fn from(r: Rejected) -> Self {
        let code = match r {
            Rejected::Inactive => StatusCode::CONFLICT,
            Rejected::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            Rejected::BadRegion { .. } | Rejected::EmptyHint => StatusCode::BAD_REQUEST,
        };
        ApiError(code, r.to_string())
    }
}

type Reg = State<Arc<Registry>>;

#[derive(Serialize)]
struct RunListItem {
    id: String,
    active: bool,
    status: String,
    iteration: u64,
    best_id: Option<CandidateId>,
    best_score: Option<f64>,
}

#[derive(Serialize)]
struct ScorePoint {
    iteration: u64,
    candidate: CandidateId,
    score: f64,
    valid: bool,
}

#[derive(Serialize)]
struct RunSummary {
    id: String,
    active: bool,
    status: String,
    iteration: u64,
    max_iterations: u64,
    best_id: Option<CandidateId>,
    best_score: Option<f64>,
    phase: Phase,
    pending_hints: Vec<String>,
    hint_bank: Vec<String>,
    paused: bool,
    locked_regions: BTreeSet<usize>,
    regions: usize,
    meta_recommendations: String,
    rollback: Option<CandidateId>,
    /// Best score after each iteration.
    series: Vec<f64>,
    /// Full-split score of every evaluated candidate.
    scores: Vec<ScorePoint>,
    event_counts: BTreeMap<String, usize>,
    evaluator_invocations: usize,
    events: u64,
}

#[derive(Serialize)]
struct TreeNode {
    id: CandidateId,
    parent: Option<CandidateId>,
    migrated_from: Option<CandidateId>,
    island: usize,
    generation: u64,
    origin: Option<Origin>,
    patch: Option<PatchKind>,
    score: Option<f64>,
    minibatch_score: Option<f64>,
    valid: Option<bool>,
    inserted: bool,
}

#[derive(Serialize)]
struct Tree {
    nodes: Vec<TreeNode>,
    best_id: Option<CandidateId>,
    rollback: Option<CandidateId>,
}

#[derive(Serialize)]
struct CandidateView {
    #[serde(flatten)]
    node: Node,
    text: String,
}

#[derive(Deserialize)]
struct HintBody {
    text: String,
}

#[derive(Deserialize)]
struct RollbackBody {
    candidate: CandidateId,
}

#[derive(Deserialize)]
struct LockBody {
    region: usize,
}

#[derive(Deserialize)]
struct EventsQuery {
    /// Last sequence number already seen.
    after: Option<u64>,
}

async fn list(State(reg): Reg) -> Json<Vec<RunListItem>> {
    Json(
        reg.all()
            .iter()
            .map(|live| {
                let active = live.is_accepting();
                live.view(|s, evs| RunListItem {
                    id: live.id().into(),
                    active,
                    status: RunReport::from_events(s, evs).status,
                    iteration: s.iteration,
                    best_id: s.best_id,
                    best_score: s.best_score,
                })
            })
            .collect(),
    )
}

async fn run_summary(State(reg): Reg, UrlPath(id): UrlPath<String>) -> Result<Json<RunSummary>, ApiError> {
    let (live, _) = reg.get(&id)?;
    let active = live.is_accepting();
    Ok(Json(live.view(|s, evs| {
        let report = RunReport::from_events(s, evs);
        let scores = evs
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::Evaluated {
                    candidate,
                    split,
                    score,
                    valid,
                    ..
                } if split != "minibatch" => Some(ScorePoint {
                    iteration: e.iteration,
                    candidate: *candidate,
                    score: *score,
                    valid: *valid,
                }),
                _ => None,
            })
            .collect();
        RunSummary {
            id: id.clone(),
            active,
            status: report.status,
            iteration: s.iteration,
            max_iterations: s.config.max_iterations,
            best_id: s.best_id,
            best_score: s.best_score,
            phase: s.phase,
            pending_hints: s.pending_hints.clone(),
            hint_bank: s.hint_bank.clone(),
            paused: s.paused,
            locked_regions: s.locked_regions.clone(),
            regions: live.regions(),
            meta_recommendations: s.meta_recommendations.clone(),
            rollback: s.rollback,
            series: report.trajectory,
            scores,
            event_counts: report.event_counts,
            evaluator_invocations: report.evaluator_invocations,
            events: s.event_count,
        }
    })))
}

async fn tree(State(reg): Reg, UrlPath(id): UrlPath<String>) -> Result<Json<Tree>, ApiError> {
    let (live, _) = reg.get(&id)?;
    Ok(Json(live.view(|s, _| Tree {
        nodes: s
            .nodes
            .values()
            .map(|n| TreeNode {
                id: n.id,
                parent: n.parent,
                migrated_from: n.migrated_from,
                island: n.island,
                generation: n.generation,
                origin: n.origin,
                patch: n.patch,
                score: n.score,
                minibatch_score: n.minibatch_score,
                valid: n.valid,
                inserted: n.inserted,
            })
            .collect(),
        best_id: s.best_id,
        rollback: s.rollback,
    })))
}

async fn candidate(
    State(reg): Reg,
    UrlPath((id, cid)): UrlPath<(String, CandidateId)>,
) -> Result<Json<CandidateView>, ApiError> {
    let (live, _) = reg.get(&id)?;
    let node = live
        .view(|s, _| s.nodes.get(&cid).cloned())
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown candidate {cid}")))?;
    let text = crate::store::read_candidate(live.dir(), cid)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(CandidateView { node, text }))
}

async fn events(
    State(reg): Reg,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    let (live, mut tick) = reg.get(&id)?;
    let last = q.after.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let mut next = last.map_or(0, |l: u64| l + 1);
    let (tx, rx) = mpsc::channel::<Result<Event, Infallible>>(256);
    tokio::spawn(async move {
        loop {
            let (batch, sealed) = live.events_from(next);
            for ev in batch {
                next = ev.seq + 1;
                let data = serde_json::to_string(&ev).expect("events serialize");
                if tx.send(Ok(Event::default().id(ev.seq.to_string()).data(data))).await.is_err() {
                    return;
                }
            }
            if sealed || tick.changed().await.is_err() {
                return;
            }
        }
    });
    Ok(Sse::new(ReceiverStream::new(rx)).keep_alive(KeepAlive::default()))
}

fn accepted(kind: &str) -> (StatusCode, Json<serde_json::Value>) {
    (StatusCode::ACCEPTED, Json(serde_json::json!({ "accepted": kind })))
}

fn submit(reg: &Registry, id: &str, cmd: Command) -> Result<(), ApiError> {
    let (live, _) = reg.get(id)?;
    live.submit(cmd).map_err(ApiError::from)
}

async fn hint(State(reg): Reg, UrlPath(id): UrlPath<String>, Json(b): Json<HintBody>) -> Result<impl IntoResponse, ApiError> {
    submit(&reg, &id, Command::Hint(b.text))?;
    Ok(accepted("hint"))
}

async fn pause(State(reg): Reg, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    submit(&reg, &id, Command::Pause)?;
    Ok(accepted("pause"))
}

async fn resume(State(reg): Reg, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    submit(&reg, &id, Command::Resume)?;
    Ok(accepted("resume"))
}

async fn rollback(
    State(reg): Reg,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<RollbackBody>,
) -> Result<impl IntoResponse, ApiError> {
    submit(&reg, &id, Command::Rollback(b.candidate))?;
    Ok(accepted("rollback"))
}

async fn lock(State(reg): Reg, UrlPath(id): UrlPath<String>, Json(b): Json<LockBody>) -> Result<impl IntoResponse, ApiError> {
    submit(&reg, &id, Command::Lock(b.region))?;
    Ok(accepted("lock"))
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/api/runs", get(list))
        .route("/api/runs/{id}", get(run_summary))
        .route("/api/runs/{id}/tree", get(tree))
        .route("/api/runs/{id}/candidates/{cid}", get(candidate))
        .route("/api/runs/{id}/events", get(events))
        .route("/api/runs/{id}/hints", post(hint))
        .route("/api/runs/{id}/pause", post(pause))
        .route("/api/runs/{id}/resume", post(resume))
        .route("/api/runs/{id}/rollback", post(rollback))
        .route("/api/runs/{id}/lock", post(lock))
        .with_state(registry)
}

/// A server running on its own thread and runtime.
pub struct Server {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops, which it does not on its own.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background thread.
pub fn serve(registry: Arc<Registry>, addr: SocketAddr) -> std::io::Result<Server> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(registry);
    let thread = std::thread::Builder::new().name("adrs-api".into()).spawn(move || {
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("api listener: {e}");
                    return;
                }
            };
            tokio::select! {
                r = axum::serve(listener, app) => {
                    if let Err(e) = r {
                        log::error!("api server: {e}");
                    }
                }
                _ = stopped => {}
            }
        });
        rt.shutdown_timeout(std::time::Duration::from_secs(1));
    })?;
    Ok(Server {
        addr,
        stop: Some(stop),
        thread: Some(thread),
    })
}

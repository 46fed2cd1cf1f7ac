//! HTTP API over recorded episodes: frames, influence graphs, explanations,
//! important steps and what-if branches. Sessions live in memory.

mod error;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use cfexplain_core::envs::{
    Controllers, Environment, Episode, ObservationLog, WorldState, ENV_NAMES,
};
use cfexplain_core::explain::{important_steps, render_explanation, Lexicon, DEFAULT_HORIZON};
use cfexplain_core::graph::{build_graph, GraphError, InfluenceGraph, DEFAULT_XI};
use cfexplain_core::model::{ObjectId, Observation};
use cfexplain_core::rollout;
use cfexplain_core::session::{episode_from_jsonl, what_if, CounterfactualRollout, WhatIfEdit};

pub use error::ApiError;

/// Step cap for sessions created without one.
pub const DEFAULT_STEPS: usize = 60;
/// Largest step cap a client may request.
pub const MAX_STEPS: usize = 1000;
pub const DEFAULT_FRACTION: f64 = 0.1;

type ApiResult<T> = Result<T, ApiError>;

/// One loaded episode with its lazily built graphs and what-if branches.
pub struct Session {
    pub id: String,
    pub episode: Arc<Episode>,
    env: &'static dyn Environment,
    lexicon: Lexicon,
    log: ObservationLog,
    graphs: Mutex<HashMap<u64, Arc<InfluenceGraph>>>,
    branches: RwLock<BTreeMap<String, Arc<Branch>>>,
    next_branch: AtomicU64,
}

struct Branch {
    rollout: CounterfactualRollout,
    log: ObservationLog,
}

impl Session {
    fn new(id: String, episode: Episode) -> ApiResult<Self> {
        let env = episode.env()?;
        let lexicon =
            Lexicon::builtin(&episode.env_name).map_err(|e| ApiError::internal(e.to_string()))?;
        let log = ObservationLog::from_frames(env, &episode.frames);
        Ok(Session {
            id,
            episode: Arc::new(episode),
            env,
            lexicon,
            log,
            graphs: Mutex::new(HashMap::new()),
            branches: RwLock::new(BTreeMap::new()),
            next_branch: AtomicU64::new(1),
        })
    }

    /// The influence graph for `xi`, built on first use. Concurrent first
    /// requests may both build it; the graphs are identical, so whichever
    /// lands first is kept.
    pub fn graph(&self, xi: f64) -> Result<Arc<InfluenceGraph>, GraphError> {
        if let Some(g) = self.graphs.lock().get(&xi.to_bits()) {
            return Ok(g.clone());
        }
        let controllers = Controllers::for_episode(&self.episode)?;
        let built = Arc::new(build_graph(&self.episode, &controllers, xi)?);
        Ok(self
            .graphs
            .lock()
            .entry(xi.to_bits())
            .or_insert(built)
            .clone())
    }

    fn agent(&self, raw: &str) -> ApiResult<ObjectId> {
        let id = ObjectId::from(raw);
        if self.env.is_agent(&id) {
            Ok(id)
        } else {
            Err(ApiError::not_found(format!(
                "`{raw}` is not an agent of this session"
            )))
        }
    }

    fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            env: self.episode.env_name.clone(),
            seed: self.episode.seed,
            steps: self.episode.len(),
            agents: self.env.agent_ids().to_vec(),
            policies: self.episode.policies.clone(),
        }
    }
}

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an episode as a new session and returns it.
    pub fn insert(&self, episode: Episode) -> ApiResult<Arc<Session>> {
        let n = self.next_session.fetch_add(1, Ordering::Relaxed) + 1;
        let session = Arc::new(Session::new(format!("s{n}"), episode)?);
        self.sessions
            .write()
            .insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub env: String,
    pub seed: u64,
    /// Number of decision steps.
    pub steps: usize,
    pub agents: Vec<ObjectId>,
    pub policies: BTreeMap<ObjectId, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub env: String,
    pub seed: u64,
    #[serde(default)]
    pub policies: BTreeMap<ObjectId, String>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameView {
    pub step: u32,
    pub state: WorldState,
    /// What each living agent sees at this step.
    pub observations: BTreeMap<ObjectId, Observation>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainQuery {
    pub horizon: Option<u32>,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphQuery {
    pub from: Option<u32>,
    pub to: Option<u32>,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportantQuery {
    pub fraction: Option<f64>,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportantSteps {
    pub agent_id: ObjectId,
    pub fraction: f64,
    pub steps: Vec<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub edits: Vec<WhatIfEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch_id: String,
    pub session_id: String,
    pub edits: Vec<WhatIfEdit>,
    pub start_step: u32,
    pub divergence_step: Option<u32>,
    /// Number of decision steps in the branch.
    pub steps: usize,
}

/// Builds the API router over `state`.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(tasks))
        .route("/sessions", post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/frames/{t}", get(frame))
        .route(
            "/sessions/{id}/agents/{a}/explanations/{t}",
            get(explanation),
        )
        .route("/sessions/{id}/agents/{a}/graph", get(agent_graph))
        .route("/sessions/{id}/agents/{a}/important", get(important))
        .route("/sessions/{id}/whatif", post(create_branch))
        .route("/sessions/{id}/whatif/{b}", get(branch_summary))
        .route("/sessions/{id}/whatif/{b}/frames/{t}", get(branch_frame))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves the API on `addr` until interrupted.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(AppState::new())))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T, F>(work: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_step(raw: &str) -> ApiResult<u32> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("no step `{raw}`")))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(q)| q)
        .map_err(|e| ApiError::invalid(e.body_text()))
}

fn frame_view(
    env: &dyn Environment,
    frames: &[WorldState],
    log: &ObservationLog,
    t: u32,
) -> ApiResult<FrameView> {
    let state = frames
        .get(t as usize)
        .ok_or_else(|| ApiError::not_found(format!("no frame {t}")))?
        .clone();
    let observations = env
        .agent_ids()
        .iter()
        .filter_map(|id| {
            log.observation(id, t)
                .map(|o| (id.clone(), Observation::clone(o)))
        })
        .collect();
    Ok(FrameView {
        step: t,
        state,
        observations,
    })
}

async fn tasks() -> Json<[&'static str; 2]> {
    Json(ENV_NAMES)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let steps = req.steps.unwrap_or(DEFAULT_STEPS);
    if steps == 0 || steps > MAX_STEPS {
        return Err(ApiError::invalid(format!(
            "steps must lie in 1..={MAX_STEPS}, got {steps}"
        )));
    }
    let episode = blocking(move || Ok(rollout(&req.env, req.seed, &req.policies, steps)?)).await?;
    let session = app.insert(episode)?;
    Ok((StatusCode::CREATED, Json(session.summary())))
}

async fn import_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let text = String::from_utf8(body.to_vec())
        .map_err(|_| ApiError::invalid("episode file is not UTF-8"))?;
    let episode = blocking(move || Ok(episode_from_jsonl(&text)?)).await?;
    let session = app.insert(episode)?;
    Ok((StatusCode::CREATED, Json(session.summary())))
}

async fn session_summary(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionSummary>> {
    Ok(Json(app.session(&id)?.summary()))
}

async fn frame(
    State(app): State<Arc<AppState>>,
    Path((id, t)): Path<(String, String)>,
) -> ApiResult<Json<FrameView>> {
    let s = app.session(&id)?;
    let t = parse_step(&t)?;
    Ok(Json(frame_view(s.env, &s.episode.frames, &s.log, t)?))
}

async fn explanation(
    State(app): State<Arc<AppState>>,
    Path((id, a, t)): Path<(String, String, String)>,
    q: Result<Query<ExplainQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let s = app.session(&id)?;
    let agent = s.agent(&a)?;
    let t = parse_step(&t)?;
    let q = query(q)?;
    if t as usize >= s.episode.len() {
        return Err(ApiError::not_found(format!(
            "step {t} is outside the episode's {} decision steps",
            s.episode.len()
        )));
    }
    let xi = q.xi.unwrap_or(DEFAULT_XI);
    let horizon = q.horizon.unwrap_or(DEFAULT_HORIZON);
    if horizon == 0 {
        return Err(GraphError::BadHorizon.into());
    }
    let explanation = blocking(move || {
        let g = s.graph(xi)?;
        Ok(render_explanation(
            &g, &s.episode, &s.lexicon, &agent, t, horizon,
        )?)
    })
    .await?;
    Ok(Json(explanation))
}

async fn agent_graph(
    State(app): State<Arc<AppState>>,
    Path((id, a)): Path<(String, String)>,
    q: Result<Query<GraphQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let s = app.session(&id)?;
    let agent = s.agent(&a)?;
    let q = query(q)?;
    let last = s.episode.frames.len() as u32 - 1;
    let from = q.from.unwrap_or(0);
    let to = q.to.unwrap_or(last);
    if from > to {
        return Err(ApiError::invalid(format!("from {from} is after to {to}")));
    }
    if to > last {
        return Err(ApiError::not_found(format!("no frame {to}")));
    }
    let xi = q.xi.unwrap_or(DEFAULT_XI);
    let graph = blocking(move || Ok(s.graph(xi)?.agent_view(&agent).subgraph(from, to))).await?;
    Ok(Json(graph))
}

async fn important(
    State(app): State<Arc<AppState>>,
    Path((id, a)): Path<(String, String)>,
    q: Result<Query<ImportantQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let s = app.session(&id)?;
    let agent = s.agent(&a)?;
    let q = query(q)?;
    let fraction = q.fraction.unwrap_or(DEFAULT_FRACTION);
    let xi = q.xi.unwrap_or(DEFAULT_XI);
    let steps = blocking(move || {
        let g = s.graph(xi)?;
        Ok(important_steps(&g, &s.episode, &agent, fraction)?)
    })
    .await?;
    Ok(Json(ImportantSteps {
        agent_id: ObjectId::from(a),
        fraction,
        steps,
    }))
}

fn branch_summary_of(
    session: &Session,
    id: &str,
    rollout: &CounterfactualRollout,
) -> BranchSummary {
    BranchSummary {
        branch_id: id.to_owned(),
        session_id: session.id.clone(),
        edits: rollout.edits.clone(),
        start_step: rollout.start_step,
        divergence_step: rollout.divergence_step,
        steps: rollout.episode.len(),
    }
}

async fn create_branch(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let s = app.session(&id)?;
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let summary = blocking(move || {
        let rollout = what_if(&s.episode, &req.edits)?;
        let log = ObservationLog::from_frames(s.env, &rollout.episode.frames);
        let n = s.next_branch.fetch_add(1, Ordering::Relaxed);
        let branch_id = format!("b{n}");
        let summary = branch_summary_of(&s, &branch_id, &rollout);
        s.branches
            .write()
            .insert(branch_id, Arc::new(Branch { rollout, log }));
        Ok(summary)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

fn branch(s: &Session, b: &str) -> ApiResult<Arc<Branch>> {
    s.branches
        .read()
        .get(b)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no branch `{b}`")))
}

async fn branch_summary(
    State(app): State<Arc<AppState>>,
    Path((id, b)): Path<(String, String)>,
) -> ApiResult<Json<BranchSummary>> {
    let s = app.session(&id)?;
    let branch = branch(&s, &b)?;
    Ok(Json(branch_summary_of(&s, &b, &branch.rollout)))
}

async fn branch_frame(
    State(app): State<Arc<AppState>>,
    Path((id, b, t)): Path<(String, String, String)>,
) -> ApiResult<Json<FrameView>> {
    let s = app.session(&id)?;
    let branch = branch(&s, &b)?;
    let t = parse_step(&t)?;
    Ok(Json(frame_view(
        s.env,
        &branch.rollout.episode.frames,
        &branch.log,
        t,
    )?))
}

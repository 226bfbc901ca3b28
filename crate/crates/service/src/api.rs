//! The `/v1` JSON API.
//!
//! Outputs reach clients only through opaque handles. A handle resolves to
//! its model once the session it belongs to is closed; handles minted
//! outside a session never resolve.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use tokio::sync::Semaphore;

use clbd_core::corpus::{Direction, NodeType, Split, TaskInstance, TaskKind};
use clbd_core::evalsuite::ScoredText;
use clbd_core::genmodels::{generate_sentence, load_model, LoadedModel, NodePredictor};
use clbd_core::inspiration::{build_query, NeighborCaps, NeighborSource};
use clbd_core::prompting::ModelInput;
use clbd_core::text::sha256_hex;
use clbd_core::workflow::model_input;

use crate::config::{source_tag, Config};
use crate::error::ServiceError;
use crate::protocol::{agreement_report, assign, AnnotationRecord, Criteria, Label, INSTANCES_PER_RATER, PAIR_OVERLAP};
use crate::stages::{node_predictor, Resources};
use crate::store::{annotation_id, Commit, Event, GeneratedItem, Generation, Session, State as StoreState, Store, StoredResponse};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAY_HEADER: &str = "idempotent-replay";

/// Error body: `{"error": {"code", "message", "field"}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), field: None }
    }

    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self { field: Some(field.into()), ..Self::new(StatusCode::BAD_REQUEST, "invalid_field", message) }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn forbidden(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, code, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message, "field": self.field } });
        (self.status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<clbd_core::Error> for ApiError {
    fn from(e: clbd_core::Error) -> Self {
        ServiceError::from(e).into()
    }
}

type ApiResult<T = Response> = Result<T, ApiError>;

/// A JSON object body, consumed field by field so errors can name the field
/// and leftovers can be rejected.
struct Fields(Map<String, Value>);

impl Fields {
    fn parse(body: &[u8]) -> ApiResult<Self> {
        if body.iter().all(u8::is_ascii_whitespace) {
            return Ok(Self(Map::new()));
        }
        match serde_json::from_slice::<Value>(body) {
            Ok(Value::Object(m)) => Ok(Self(m)),
            Ok(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", "body must be a JSON object")),
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", format!("malformed JSON: {e}"))),
        }
    }

    fn take(&mut self, k: &str) -> Option<Value> {
        self.0.remove(k).filter(|v| !v.is_null())
    }

    fn opt_string(&mut self, k: &str) -> ApiResult<Option<String>> {
        match self.take(k) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(ApiError::field(k, format!("`{k}` must be a string"))),
        }
    }

    fn string(&mut self, k: &str) -> ApiResult<String> {
        self.opt_string(k)?.ok_or_else(|| ApiError::field(k, format!("`{k}` is required")))
    }

    fn opt_u64(&mut self, k: &str) -> ApiResult<Option<u64>> {
        match self.take(k) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| ApiError::field(k, format!("`{k}` must be a non-negative integer"))),
        }
    }

    fn opt_strings(&mut self, k: &str) -> ApiResult<Option<Vec<String>>> {
        match self.take(k) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    _ => Err(ApiError::field(k, format!("`{k}` must be a list of strings"))),
                })
                .collect::<ApiResult<Vec<_>>>()
                .map(Some),
            Some(_) => Err(ApiError::field(k, format!("`{k}` must be a list of strings"))),
        }
    }

    fn opt_parsed<T: FromStr>(&mut self, k: &str) -> ApiResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.opt_string(k)? {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e| ApiError::field(k, format!("invalid `{k}`: {e}"))),
        }
    }

    fn parsed<T: FromStr>(&mut self, k: &str) -> ApiResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt_parsed(k)?.ok_or_else(|| ApiError::field(k, format!("`{k}` is required")))
    }

    fn object(&mut self, k: &str) -> ApiResult<Option<Fields>> {
        match self.take(k) {
            None => Ok(None),
            Some(Value::Object(m)) => Ok(Some(Fields(m))),
            Some(_) => Err(ApiError::field(k, format!("`{k}` must be an object"))),
        }
    }

    fn finish(self, prefix: &str) -> ApiResult<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => {
                let name = format!("{prefix}{k}");
                Err(ApiError::field(&name, format!("unknown field `{name}`")))
            }
        }
    }
}

fn parse_criteria(mut c: Fields) -> ApiResult<Criteria> {
    let mut flag = |k: &str| match c.take(k) {
        Some(Value::Bool(b)) => Ok(b),
        _ => {
            let name = format!("criteria.{k}");
            Err(ApiError::field(&name, format!("`{name}` must be a boolean")))
        }
    };
    let criteria = Criteria {
        relevance: flag("relevance")?,
        novelty: flag("novelty")?,
        scientific_sense: flag("scientific_sense")?,
        clarity: flag("clarity")?,
    };
    c.finish("criteria.")?;
    Ok(criteria)
}

/// Retrieval resources plus every registered model, loaded once at startup.
pub struct Engine {
    pub resources: Resources,
    models: BTreeMap<String, LoadedModel>,
    nodes: BTreeMap<String, Box<dyn NodePredictor>>,
}

impl Engine {
    pub fn open(cfg: &Config) -> crate::Result<Self> {
        let resources = Resources::open(cfg)?;
        let mut models = BTreeMap::new();
        let mut nodes = BTreeMap::new();
        for entry in cfg.registry().models {
            let m = load_model(&entry, Some(resources.provider.clone()))?;
            nodes.insert(entry.name.clone(), node_predictor(m.clone(), &resources.bank)?);
            models.insert(entry.name, m);
        }
        Ok(Self { resources, models, nodes })
    }

    pub fn model_names(&self) -> Vec<&str> {
        self.models.keys().map(String::as_str).collect()
    }

    fn instance(&self, task: TaskKind, id: &str) -> Option<&TaskInstance> {
        self.resources.dataset.splits(task).test.iter().find(|i| i.instance_id == id)
    }

    fn run(&self, name: &str, inst: &TaskInstance, input: &ModelInput) -> crate::Result<Vec<ScoredText>> {
        Ok(match inst.task {
            TaskKind::Node => self.nodes[name].predict(inst, input)?,
            TaskKind::Sentence => match &self.models[name] {
                LoadedModel::Generator(g) => generate_sentence(g.as_ref(), &inst.instance_id, &input.text, 1)?,
                LoadedModel::BiEncoder(_) => {
                    return Err(ServiceError::Config(format!("`{name}` cannot generate sentences")));
                }
            },
        })
    }
}

struct Shared {
    cfg: Config,
    engine: Option<Engine>,
    store: Store,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Without an engine, retrieval and generation answer 503 while the
    /// annotation endpoints keep working.
    pub fn new(cfg: Config, engine: Option<Engine>, store: Store) -> Self {
        let workers = Arc::new(Semaphore::new(cfg.serve.workers.max(1)));
        Self(Arc::new(Shared { cfg, engine, store, workers }))
    }

    pub fn store(&self) -> &Store {
        &self.0.store
    }

    fn engine(&self) -> ApiResult<&Engine> {
        self.0.engine.as_ref().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_initialized", "indexes and models are not loaded")
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/generate", post(generate))
        .route("/v1/handles/{handle}", get(resolve_handle))
        .route("/v1/instances", get(list_instances))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/close", post(close_session))
        .route("/v1/sessions/{id}/instances", get(session_instances))
        .route("/v1/annotate", post(annotate))
        .route("/v1/annotations/{id}", get(get_annotation))
        .route("/v1/reports/{id}", get(report))
        .with_state(state)
}

/// Binds, serves until Ctrl-C, then snapshots the store.
pub async fn serve(cfg: Config, bind: Option<String>) -> crate::Result<()> {
    let store = Store::open(cfg.store_dir(), cfg.serve.snapshot_every)?;
    let engine = match Engine::open(&cfg) {
        Ok(e) => Some(e),
        Err(e) => {
            log::warn!("retrieval and generation disabled: {e}");
            None
        }
    };
    let addr = bind.unwrap_or_else(|| cfg.serve.bind.clone());
    let state = AppState::new(cfg, engine, store);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    state.store().snapshot()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn hash_u64(text: &str) -> u64 {
    u64::from_str_radix(&sha256_hex(text.as_bytes())[..16], 16).expect("hex digest")
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Principal {
    /// No tokens configured: every caller may do everything.
    Open,
    Admin,
    Rater(String),
}

impl Principal {
    fn label(&self) -> String {
        match self {
            Principal::Open => "open".into(),
            Principal::Admin => "admin".into(),
            Principal::Rater(r) => format!("rater:{r}"),
        }
    }

    fn require_admin(&self) -> ApiResult<()> {
        match self {
            Principal::Rater(_) => Err(ApiError::forbidden("admin_only", "this endpoint needs the admin token")),
            _ => Ok(()),
        }
    }
}

fn principal(app: &AppState, headers: &HeaderMap) -> ApiResult<Principal> {
    let serve = &app.0.cfg.serve;
    if serve.admin_token.is_none() && serve.raters.is_empty() {
        return Ok(Principal::Open);
    }
    let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", m);
    let token = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| unauthorized("missing bearer token"))?;
    if serve.admin_token.as_deref() == Some(token) {
        return Ok(Principal::Admin);
    }
    serve
        .raters
        .iter()
        .find(|(_, t)| t.as_str() == token)
        .map(|(r, _)| Principal::Rater(r.clone()))
        .ok_or_else(|| unauthorized("unknown token"))
}

/// Retry key from the header or the body's `client_token`, scoped to the
/// route and caller so two raters cannot collide.
fn idempotency_key(route: &str, who: &Principal, headers: &HeaderMap, fields: &mut Fields) -> ApiResult<Option<String>> {
    let body = fields.opt_string("client_token")?;
    let header = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    Ok(header.or(body).map(|k| format!("{route}\u{1f}{}\u{1f}{k}", who.label())))
}

fn respond(commit: Commit) -> Response {
    let replayed = matches!(commit, Commit::Replayed(_));
    let r = commit.response();
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::OK);
    let mut resp = (status, Json(r.body)).into_response();
    if replayed {
        resp.headers_mut().insert(REPLAY_HEADER, HeaderValue::from_static("true"));
    }
    resp
}

fn stored(status: StatusCode, body: Value) -> StoredResponse {
    StoredResponse { status: status.as_u16(), body }
}

/// Instance fields a rater may see: no gold node or sentence.
fn public_instance(i: &TaskInstance) -> Value {
    json!({
        "instance_id": i.instance_id,
        "task": i.task,
        "seed": i.seed,
        "target_type": i.target_type,
        "direction": i.direction,
        "background": i.background,
        "paper_id": i.paper_id,
        "year": i.year,
    })
}

/// Session view. Model names are listed only once the session is closed.
fn session_view(s: &Session) -> Value {
    let mut v = json!({
        "id": s.id,
        "raters": s.raters,
        "task": s.task,
        "open": s.open,
        "created_ms": s.created_ms,
        "closed_ms": s.closed_ms,
        "assignment": s.assignment,
        "model_count": s.models.len(),
    });
    if !s.open {
        v["models"] = json!(s.models);
    }
    v
}

fn blinded_outputs(g: &Generation) -> Value {
    let outputs: Vec<Value> =
        g.items.iter().map(|i| json!({ "handle": i.handle, "text": i.text, "candidates": i.candidates })).collect();
    json!(outputs)
}

async fn health(State(app): State<AppState>) -> Json<Value> {
    let models = app.0.engine.as_ref().map_or(0, |e| e.models.len());
    Json(json!({ "status": "ok", "engine": app.0.engine.is_some(), "models": models }))
}

/// An ad hoc query built from request fields.
fn query_instance(f: &mut Fields, engine: &Engine) -> ApiResult<TaskInstance> {
    let task = f.opt_parsed::<TaskKind>("task")?.unwrap_or(TaskKind::Node);
    let seed = f.string("seed")?;
    if seed.trim().is_empty() {
        return Err(ApiError::field("seed", "`seed` must not be empty"));
    }
    let target_type: NodeType = f.parsed("target_type")?;
    let direction: Direction = f.parsed("direction")?;
    let background = f.opt_string("background")?.unwrap_or_default();
    let doc_id = f.opt_string("doc_id")?.unwrap_or_default();
    let key = format!("{task}\u{1f}{seed}\u{1f}{target_type}\u{1f}{direction}\u{1f}{background}\u{1f}{doc_id}");
    Ok(TaskInstance {
        instance_id: format!("query-{}", &sha256_hex(key.as_bytes())[..12]),
        task,
        seed,
        target_type,
        direction,
        background_sentences: vec![background.clone()],
        background,
        background_terms: Vec::new(),
        target_node: String::new(),
        target_sentence: None,
        paper_id: doc_id,
        year: engine.resources.dataset.cutoff_year(),
    })
}

fn parse_caps(f: &mut Fields, cfg: &Config) -> ApiResult<NeighborCaps> {
    let mut caps = cfg.retrieval.caps();
    if let Some(mut c) = f.object("caps")? {
        if let Some(n) = c.opt_u64("semantic")? {
            caps.semantic = n as usize;
        }
        if let Some(n) = c.opt_u64("citation")? {
            caps.citation = n as usize;
        }
        c.finish("caps.")?;
    }
    Ok(caps)
}

async fn retrieve(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    principal(&app, &headers)?;
    let engine = app.engine()?;
    let mut f = Fields::parse(&body)?;
    let inst = query_instance(&mut f, engine)?;
    let caps = parse_caps(&mut f, &app.0.cfg)?;
    let source = f.opt_parsed::<NeighborSource>("neighbor_source")?.unwrap_or(NeighborSource::Semantic);
    f.finish("")?;
    let mut retriever = engine.resources.retriever(&app.0.cfg, inst.task);
    retriever.caps = caps;
    let neighbors = retriever.retrieve(&inst)?;
    let input = model_input(&inst, neighbors.get(source));
    Ok(Json(json!({
        "query": build_query(&inst),
        "neighbors": { "semantic": neighbors.semantic, "kg": neighbors.kg, "citation": neighbors.citation },
        "neighbor_source": source_tag(source),
        "model_input": input,
    }))
    .into_response())
}

async fn generate(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let who = principal(&app, &headers)?;
    let engine = app.engine()?;
    let mut f = Fields::parse(&body)?;
    let key = idempotency_key("generate", &who, &headers, &mut f)?;
    if let Some(r) = key.as_deref().and_then(|k| app.0.store.stored_response(k)) {
        return Ok(respond(Commit::Replayed(r)));
    }
    let session_id = f.opt_string("session_id")?;
    let single = f.opt_string("model")?;
    let many = f.opt_strings("models")?;
    let source = f.opt_parsed::<NeighborSource>("neighbor_source")?.unwrap_or(NeighborSource::None);

    let (inst, session) = match &session_id {
        Some(sid) => {
            let session = app.0.store.read(|s| s.sessions.get(sid).cloned()).ok_or_else(|| {
                ApiError::not_found(format!("no session `{sid}`"))
            })?;
            if !session.open {
                return Err(ApiError::conflict(format!("session `{sid}` is closed")));
            }
            let iid = f.string("instance_id")?;
            let assigned = session.assignment.per_rater.values().any(|l| l.contains(&iid));
            let task: TaskKind = session.task.parse()?;
            let inst = engine
                .instance(task, &iid)
                .filter(|_| assigned)
                .ok_or_else(|| ApiError::field("instance_id", format!("`{iid}` is not part of session `{sid}`")))?;
            (inst.clone(), Some(session))
        }
        None => (query_instance(&mut f, engine)?, None),
    };
    f.finish("")?;

    let models: Vec<String> = match (single, many, &session) {
        (Some(m), None, _) => vec![m],
        (None, Some(ms), _) => ms,
        (None, None, Some(s)) => s.models.clone(),
        (Some(_), Some(_), _) => return Err(ApiError::field("models", "give either `model` or `models`")),
        (None, None, None) => return Err(ApiError::field("models", "`models` is required")),
    };
    if models.is_empty() {
        return Err(ApiError::field("models", "`models` must not be empty"));
    }
    let mut seen = BTreeSet::new();
    for m in &models {
        if !engine.models.contains_key(m) {
            return Err(ApiError::field("models", format!("unregistered model `{m}`")));
        }
        if !seen.insert(m) {
            return Err(ApiError::field("models", format!("`{m}` listed twice")));
        }
    }
    if inst.task == TaskKind::Sentence {
        if let Some(m) = models.iter().find(|m| matches!(engine.models[*m], LoadedModel::BiEncoder(_))) {
            return Err(ApiError::field("models", format!("`{m}` cannot generate sentences")));
        }
    }

    let neighbors = match source {
        NeighborSource::None => Vec::new(),
        s => engine.resources.retriever(&app.0.cfg, inst.task).retrieve(&inst)?.get(s).to_vec(),
    };
    let input = model_input(&inst, &neighbors);

    let inst = Arc::new(inst);
    let input = Arc::new(input);
    let mut jobs = Vec::new();
    for m in models.clone() {
        let permit = app.0.workers.clone().acquire_owned().await.expect("semaphore never closed");
        let (app, inst, input) = (app.clone(), inst.clone(), input.clone());
        jobs.push(tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let engine = app.0.engine.as_ref().expect("checked above");
            engine.run(&m, &inst, &input)
        }));
    }
    let mut outputs = Vec::new();
    for (m, job) in models.iter().zip(jobs) {
        let ranked = job.await.map_err(|e| ServiceError::Store(format!("worker failed: {e}")))??;
        outputs.push((m.clone(), ranked));
    }

    let shuffle_seed = session.as_ref().map_or(app.0.cfg.serve.shuffle_seed, |s| s.shuffle_seed);
    let sid = session_id.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ hash_u64(&format!("{sid}\u{1f}{}", inst.instance_id)));
    outputs.shuffle(&mut rng);
    let items: Vec<GeneratedItem> = outputs
        .into_iter()
        .map(|(model_id, ranked)| GeneratedItem {
            handle: format!("h-{:016x}{:016x}", rand::random::<u64>(), rand::random::<u64>()),
            model_id,
            text: ranked.first().map(|s| s.text.clone()).unwrap_or_default(),
            candidates: ranked.into_iter().map(|s| s.text).collect(),
        })
        .collect();

    let commit = app.0.store.mutate::<ApiError>(key.as_deref(), |state| {
        if let Some(s) = session_id.as_ref().and_then(|id| state.sessions.get(id)) {
            if !s.open {
                return Err(ApiError::conflict(format!("session `{}` is closed", s.id)));
            }
        }
        let generation = Generation {
            id: format!("g{:06}", state.seq + 1),
            session_id: session_id.clone(),
            instance_id: inst.instance_id.clone(),
            input: input.text.clone(),
            items,
            created_ms: now_ms(),
        };
        let body = json!({
            "generation_id": generation.id,
            "session_id": generation.session_id,
            "instance_id": generation.instance_id,
            "task": inst.task,
            "neighbor_source": source_tag(source),
            "input": generation.input,
            "outputs": blinded_outputs(&generation),
        });
        Ok((Some(Event::Generated { generation }), stored(StatusCode::OK, body)))
    })?;
    Ok(respond(commit))
}

async fn resolve_handle(State(app): State<AppState>, headers: HeaderMap, Path(handle): Path<String>) -> ApiResult {
    principal(&app, &headers)?;
    app.0.store.read(|s| {
        let (g, item) = s.item(&handle).ok_or_else(|| ApiError::not_found(format!("no handle `{handle}`")))?;
        let closed = g.session_id.as_ref().and_then(|id| s.sessions.get(id)).is_some_and(|s| !s.open);
        if !closed {
            return Err(ApiError::forbidden("blinded", "model identity is hidden until the session closes"));
        }
        Ok(Json(json!({
            "handle": item.handle,
            "model_id": item.model_id,
            "text": item.text,
            "generation_id": g.id,
            "session_id": g.session_id,
            "instance_id": g.instance_id,
        }))
        .into_response())
    })
}

async fn list_instances(
    State(app): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    principal(&app, &headers)?;
    let engine = app.engine()?;
    let task = match q.get("task") {
        None => TaskKind::Node,
        Some(t) => t.parse().map_err(|e| ApiError::field("task", format!("invalid `task`: {e}")))?,
    };
    let split = match q.get("split").map(String::as_str) {
        None | Some("test") => Split::Test,
        Some("valid") => Split::Valid,
        Some("train") => Split::Train,
        Some(other) => return Err(ApiError::field("split", format!("unknown split `{other}`"))),
    };
    let items: Vec<Value> = engine.resources.dataset.splits(task).get(split).iter().map(public_instance).collect();
    Ok(Json(json!({ "task": task, "split": split, "instances": items })).into_response())
}

async fn create_session(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let who = principal(&app, &headers)?;
    who.require_admin()?;
    let engine = app.engine()?;
    let mut f = Fields::parse(&body)?;
    let key = idempotency_key("sessions", &who, &headers, &mut f)?;
    let id = f.opt_string("id")?;
    let raters = f.opt_strings("raters")?.ok_or_else(|| ApiError::field("raters", "`raters` is required"))?;
    let models = f.opt_strings("models")?.ok_or_else(|| ApiError::field("models", "`models` is required"))?;
    let task = f.opt_parsed::<TaskKind>("task")?.unwrap_or(TaskKind::Node);
    let per_rater = f.opt_u64("per_rater")?.map_or(INSTANCES_PER_RATER, |n| n as usize);
    let overlap = f.opt_u64("overlap")?.map_or(PAIR_OVERLAP, |n| n as usize);
    let seed = f.opt_u64("seed")?.unwrap_or(app.0.cfg.serve.shuffle_seed);
    f.finish("")?;

    let known = &app.0.cfg.serve.raters;
    if let Some(r) = raters.iter().find(|r| !known.is_empty() && !known.contains_key(*r)) {
        return Err(ApiError::field("raters", format!("`{r}` has no token in the config")));
    }
    if models.is_empty() {
        return Err(ApiError::field("models", "`models` must not be empty"));
    }
    if let Some(m) = models.iter().find(|m| !engine.models.contains_key(*m)) {
        return Err(ApiError::field("models", format!("unregistered model `{m}`")));
    }
    let pool: Vec<String> = engine.resources.dataset.splits(task).test.iter().map(|i| i.instance_id.clone()).collect();
    let assignment = assign(&raters, &pool, per_rater, overlap, seed).map_err(|e| ApiError::field("raters", e))?;

    let commit = app.0.store.mutate::<ApiError>(key.as_deref(), |state| {
        let id = id.clone().unwrap_or_else(|| format!("s{:04}", state.seq + 1));
        if state.sessions.contains_key(&id) {
            return Err(ApiError::conflict(format!("session `{id}` exists")));
        }
        let session = Session {
            id,
            raters: raters.clone(),
            models: models.clone(),
            task: task.to_string(),
            assignment,
            shuffle_seed: seed,
            open: true,
            created_ms: now_ms(),
            closed_ms: None,
        };
        let body = session_view(&session);
        Ok((Some(Event::SessionCreated { session }), stored(StatusCode::CREATED, body)))
    })?;
    Ok(respond(commit))
}

fn find_session<'a>(s: &'a StoreState, id: &str) -> ApiResult<&'a Session> {
    s.sessions.get(id).ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
}

async fn get_session(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    principal(&app, &headers)?;
    app.0.store.read(|s| Ok(Json(session_view(find_session(s, &id)?)).into_response()))
}

async fn close_session(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let who = principal(&app, &headers)?;
    who.require_admin()?;
    let commit = app.0.store.mutate::<ApiError>(None, |state| {
        let s = find_session(state, &id)?;
        if !s.open {
            return Ok((None, stored(StatusCode::OK, session_view(s))));
        }
        let mut closed = s.clone();
        let at_ms = now_ms();
        closed.open = false;
        closed.closed_ms = Some(at_ms);
        Ok((Some(Event::SessionClosed { id: id.clone(), at_ms }), stored(StatusCode::OK, session_view(&closed))))
    })?;
    Ok(respond(commit))
}

/// A rater's assigned instances, each with the latest blinded outputs
/// generated for it in this session.
async fn session_instances(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let who = principal(&app, &headers)?;
    let rater = match (&who, q.get("rater")) {
        (Principal::Rater(r), None) => r.clone(),
        (Principal::Rater(r), Some(asked)) if asked != r => {
            return Err(ApiError::forbidden("wrong_rater", "raters can list only their own instances"))
        }
        (_, Some(r)) => r.clone(),
        (_, None) => return Err(ApiError::field("rater", "`rater` query parameter is required")),
    };
    let engine = app.0.engine.as_ref();
    app.0.store.read(|s| {
        let session = find_session(s, &id)?;
        let assigned = session
            .assignment
            .per_rater
            .get(&rater)
            .ok_or_else(|| ApiError::field("rater", format!("`{rater}` is not in session `{id}`")))?;
        let task: TaskKind = session.task.parse()?;
        let items: Vec<Value> = assigned
            .iter()
            .map(|iid| {
                let latest = s
                    .generations
                    .values()
                    .filter(|g| g.session_id.as_deref() == Some(id.as_str()) && &g.instance_id == iid)
                    .max_by_key(|g| g.id.clone());
                json!({
                    "instance_id": iid,
                    "instance": engine.and_then(|e| e.instance(task, iid)).map(public_instance),
                    "generation_id": latest.map(|g| g.id.clone()),
                    "outputs": latest.map_or(json!([]), blinded_outputs),
                })
            })
            .collect();
        Ok(Json(json!({ "session_id": id, "rater": rater, "instances": items })).into_response())
    })
}

async fn annotate(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let who = principal(&app, &headers)?;
    let mut f = Fields::parse(&body)?;
    let key = idempotency_key("annotate", &who, &headers, &mut f)?;
    let session_id = f.string("session_id")?;
    let instance_id = f.string("instance_id")?;
    let output_id = f.string("output_id")?;
    let label: Label = f.parsed("label")?;
    let criteria = match f.object("criteria")? {
        Some(c) => parse_criteria(c)?,
        None => return Err(ApiError::field("criteria", "`criteria` is required")),
    };
    let claimed = f.opt_string("rater_id")?;
    f.finish("")?;
    let rater = match (&who, claimed) {
        (Principal::Rater(r), Some(c)) if *r != c => {
            return Err(ApiError::forbidden("wrong_rater", "`rater_id` does not match the token"));
        }
        (Principal::Rater(r), _) => r.clone(),
        (_, Some(c)) => c,
        (_, None) => return Err(ApiError::field("rater_id", "`rater_id` is required without a rater token")),
    };

    let commit = app.0.store.mutate::<ApiError>(key.as_deref(), |state| {
        let session = find_session(state, &session_id)?;
        if !session.open {
            return Err(ApiError::conflict(format!("session `{session_id}` is closed")));
        }
        let assigned = session
            .assignment
            .per_rater
            .get(&rater)
            .ok_or_else(|| ApiError::forbidden("not_a_rater", format!("`{rater}` is not in session `{session_id}`")))?;
        if !assigned.contains(&instance_id) {
            return Err(ApiError::field("instance_id", format!("`{instance_id}` is not assigned to `{rater}`")));
        }
        match state.item(&output_id) {
            Some((g, _)) if g.session_id.as_deref() == Some(session_id.as_str()) && g.instance_id == instance_id => {}
            _ => {
                return Err(ApiError::field(
                    "output_id",
                    format!("`{output_id}` is not an output for `{instance_id}` in this session"),
                ))
            }
        }
        let id = annotation_id(&session_id, &rater, &instance_id, &output_id);
        let revision = state.annotations.get(&id).map_or(1, |a| a.revision + 1);
        let record = AnnotationRecord {
            id: id.clone(),
            session_id: session_id.clone(),
            rater_id: rater.clone(),
            instance_id: instance_id.clone(),
            output_id: output_id.clone(),
            label,
            criteria,
            timestamp_ms: now_ms(),
            revision,
        };
        let status = if revision == 1 { StatusCode::CREATED } else { StatusCode::OK };
        let body = json!({ "id": id, "revision": revision, "record": record });
        Ok((Some(Event::Annotated { record }), stored(status, body)))
    })?;
    Ok(respond(commit))
}

async fn get_annotation(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let who = principal(&app, &headers)?;
    app.0.store.read(|s| {
        let current = s
            .annotations
            .get(&id)
            .filter(|a| !matches!(&who, Principal::Rater(r) if *r != a.rater_id))
            .ok_or_else(|| ApiError::not_found(format!("no annotation `{id}`")))?;
        let history = s.history.get(&id).cloned().unwrap_or_default();
        Ok(Json(json!({ "current": current, "history": history })).into_response())
    })
}

async fn report(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    principal(&app, &headers)?;
    app.0.store.read(|s| {
        let session = find_session(s, &id)?;
        if session.open {
            return Err(ApiError::conflict(format!("session `{id}` is still open")));
        }
        let records = s.session_annotations(&id);
        let model_of = |h: &str| s.item(h).map(|(_, i)| i.model_id.clone());
        let r = agreement_report(&id, &session.raters, &records, &model_of);
        Ok(Json(serde_json::to_value(r).map_err(ServiceError::from)?).into_response())
    })
}

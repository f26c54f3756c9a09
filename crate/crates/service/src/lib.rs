//! Session-oriented JSON API over the two-stage pipeline.
//!
//! Every mutating call takes an optional `revision`; a value that differs
//! from the session's current revision is rejected with 409. Mutations on one
//! session are serialized by a per-session lock, appended to the session's
//! event log, then applied.

pub mod session;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mealkit_core::corpus::io::{read_corpus, Corpus};
use mealkit_core::corpus::Vocabulary;
use mealkit_core::mealkit::{build_kit, render_kit, rescale, KitFormat, MealKit};
use mealkit_core::stage1::{apply_correction, IngredientPrediction, Phase, StageOneModel};
use mealkit_core::stage2::{StageTwoModel, StageTwoOutput};
use mealkit_core::ModelError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};

use crate::session::{DishAlternative, Event, Session};
use crate::store::{EventStore, StoreError};

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "MEALKIT_PORT";
pub const STORE_ENV: &str = "MEALKIT_STORE";

/// Error with an HTTP status and a machine-readable code.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_string(), message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "SessionNotFound", format!("no session {id:?}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::StateFull
            | ModelError::DuplicateIngredient(_)
            | ModelError::BadIndex { .. }
            | ModelError::UnknownToken(_)
            | ModelError::AllMasked
            | ModelError::EmptyIngredients
            | ModelError::NonpositiveServings(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "StoreError", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Trained models and the corpus whose feature blocks sessions reference.
#[derive(Debug)]
pub struct Models {
    pub stage1: StageOneModel,
    pub stage2: StageTwoModel,
    pub corpus: Corpus,
}

impl Models {
    pub fn load(ckpt: &Path, corpus: &Path) -> Result<Self, ModelError> {
        Ok(Self { stage1: StageOneModel::load(ckpt)?, stage2: StageTwoModel::load(ckpt)?, corpus: read_corpus(corpus)? })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.stage1.vocab
    }
}

#[derive(Debug)]
pub struct AppState {
    pub models: Arc<Models>,
    pub store: EventStore,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    pub quarantined: Vec<String>,
}

impl AppState {
    /// Opens the store and replays every persisted session.
    pub fn new(models: Arc<Models>, store_dir: &Path) -> Result<Arc<Self>, StoreError> {
        let store = EventStore::open(store_dir)?;
        let restored = store.restore(models.vocab())?;
        let sessions = restored.sessions.into_iter().map(|s| (s.id.clone(), Arc::new(Mutex::new(s)))).collect();
        Ok(Arc::new(Self { models, store, sessions: RwLock::new(sessions), quarantined: restored.quarantined }))
    }

    pub async fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }

    /// Snapshot of one session.
    pub async fn snapshot(&self, id: &str) -> ApiResult<Session> {
        Ok(self.session(id).await?.lock().await.clone())
    }
}

pub type Shared = Arc<AppState>;

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn check_revision(session: &Session, revision: Option<u64>) -> ApiResult<()> {
    match revision {
        Some(r) if r != session.revision => Err(ApiError::new(
            StatusCode::CONFLICT,
            "StaleRevision",
            format!("revision {r} is stale; session is at {}", session.revision),
        )),
        _ => Ok(()),
    }
}

/// Persists `event` then applies it.
fn commit(state: &AppState, session: &mut Session, event: Event) -> ApiResult<()> {
    let mut next = session.clone();
    next.apply(&event, state.models.vocab()).map_err(|e| match e {
        session::ReplayError::Model(m) => ApiError::from(m),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", other.to_string()),
    })?;
    state.store.append(&session.id, next.revision, &event)?;
    *session = next;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    pub token: String,
    pub is_eos: bool,
    pub confidence: f64,
    pub alternatives: Vec<Candidate>,
}

impl From<&IngredientPrediction> for PredictionView {
    fn from(p: &IngredientPrediction) -> Self {
        Self {
            token: p.token.clone(),
            is_eos: p.is_eos,
            confidence: p.confidence,
            alternatives: p.alternatives.iter().map(|(t, q)| Candidate { token: t.clone(), probability: *q }).collect(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub features_ref: Option<usize>,
    pub recipe_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DishRequest {
    pub dish: String,
    pub revision: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionRequest {
    pub revision: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectRequest {
    pub step: usize,
    pub token: String,
    pub revision: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct KitQuery {
    pub servings: Option<f64>,
    pub format: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct PrefixQuery {
    pub prefix: Option<String>,
    pub limit: Option<usize>,
}

fn accepted_view(s: &Session) -> serde_json::Value {
    json!({
        "phase": s.state.phase,
        "mains": s.state.mains,
        "optionals": s.state.optionals,
    })
}

async fn create_session(State(state): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse_body(&body)?;
    let models = &state.models;
    let features_ref = match (&req.recipe_id, req.features_ref) {
        (Some(id), None) => models
            .corpus
            .features_ref(id)
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownRecipe", format!("no recipe {id:?}")))?,
        (None, Some(f)) => f,
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give features_ref or recipe_id, not both")),
        (None, None) => return Err(ApiError::bad_request("features_ref or recipe_id is required")),
    };
    let recipe = models.corpus.recipes.get(features_ref).ok_or_else(|| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownFeatures", format!("features_ref {features_ref} out of range"))
    })?;
    let (dish, probs) = models.stage1.classify_dish(&recipe.features)?;
    let mut alts: Vec<DishAlternative> = models
        .stage1
        .vocab
        .dishes()
        .iter()
        .zip(&probs)
        .map(|(d, &p)| DishAlternative { dish: d.clone(), probability: p })
        .collect();
    alts.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.dish.cmp(&b.dish)));
    alts.truncate(models.stage1.config.top_k);
    let id = uuid::Uuid::new_v4().to_string();
    let event = Event::Created {
        session_id: id.clone(),
        recipe_id: Some(recipe.id.clone()),
        features_ref,
        dish: dish.clone(),
        dish_alternatives: alts.clone(),
        max_main: models.stage1.config.max_main,
        max_total: models.stage1.config.max_ingredients,
        at: now_ms(),
    };
    let session = Session::from_created(&event).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    state.store.append(&id, 1, &event)?;
    let revision = session.revision;
    state.sessions.write().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    let body = json!({ "session_id": id, "revision": revision, "dish": dish, "dish_alternatives": alts });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    Ok(Json(state.snapshot(&id).await?))
}

async fn set_dish(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: DishRequest = parse_required(&body)?;
    let handle = state.session(&id).await?;
    let mut s = handle.lock().await;
    check_revision(&s, req.revision)?;
    commit(&state, &mut s, Event::DishSet { dish: req.dish, at: now_ms() })?;
    Ok(Json(json!({ "revision": s.revision, "dish": s.dish, "accepted": accepted_view(&s) })))
}

fn features_of<'a>(state: &'a AppState, s: &Session) -> ApiResult<&'a mealkit_core::corpus::FeatureMap> {
    state
        .models
        .corpus
        .recipes
        .get(s.features_ref)
        .map(|r| &r.features)
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "MissingFeatures", "session features are gone"))
}

async fn next_ingredient(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: RevisionRequest = parse_body(&body)?;
    let handle = state.session(&id).await?;
    let mut s = handle.lock().await;
    check_revision(&s, req.revision)?;
    let features = features_of(&state, &s)?;
    let prediction = state.models.stage1.next_ingredient(&s.state, features)?;
    let view = PredictionView::from(&prediction);
    commit(&state, &mut s, Event::Predicted { prediction, at: now_ms() })?;
    Ok(Json(json!({ "revision": s.revision, "prediction": view, "accepted": accepted_view(&s) })))
}

async fn correct(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: CorrectRequest = parse_required(&body)?;
    let handle = state.session(&id).await?;
    let mut s = handle.lock().await;
    check_revision(&s, req.revision)?;
    apply_correction(&s.state, req.step, &req.token, state.models.vocab())?;
    commit(&state, &mut s, Event::Corrected { step: req.step, token: req.token, at: now_ms() })?;
    let next = if s.state.phase == Phase::Done {
        None
    } else {
        let features = features_of(&state, &s)?;
        Some(PredictionView::from(&state.models.stage1.next_ingredient(&s.state, features)?))
    };
    Ok(Json(json!({ "revision": s.revision, "accepted": accepted_view(&s), "next": next })))
}

fn estimate_for(state: &AppState, s: &Session) -> ApiResult<(StageTwoOutput, MealKit)> {
    let accepted = s.state.accepted();
    if accepted.is_empty() {
        return Err(ModelError::EmptyIngredients.into());
    }
    let features = features_of(state, s)?;
    let stage2 = &state.models.stage2;
    let output = stage2.estimate(&stage2.inputs(&accepted, features, None)?)?;
    let kit = build_kit(&s.dish, &output, &state.models.corpus.table)?;
    Ok((output, kit))
}

fn estimate_view(revision: u64, output: &StageTwoOutput, kit: &MealKit) -> serde_json::Value {
    let items: Vec<_> = kit
        .items
        .iter()
        .map(|i| json!({ "token": i.ingredient, "unit": i.unit, "unit_conf": i.unit_confidence, "portion": i.portion, "kcal": i.kcal }))
        .collect();
    json!({
        "revision": revision,
        "per_ingredient": items,
        "total_kcal": output.total,
        "item_kcal_sum": kit.item_kcal_sum,
    })
}

async fn estimate(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: RevisionRequest = parse_body(&body)?;
    let handle = state.session(&id).await?;
    let mut s = handle.lock().await;
    check_revision(&s, req.revision)?;
    let (output, kit) = estimate_for(&state, &s)?;
    commit(&state, &mut s, Event::Estimated { output: output.clone(), kit: kit.clone(), at: now_ms() })?;
    Ok(Json(estimate_view(s.revision, &output, &kit)))
}

async fn get_kit(State(state): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<KitQuery>) -> ApiResult<Response> {
    let s = state.snapshot(&id).await?;
    let base = match &s.kit {
        Some(k) => k.clone(),
        None => estimate_for(&state, &s)?.1,
    };
    let kit = rescale(&base, q.servings.unwrap_or(base.servings))?;
    let format = match q.format.as_deref() {
        None => KitFormat::Json,
        Some(f) => f.parse().map_err(|e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownFormat", e))?,
    };
    let bytes = render_kit(&kit, format)?;
    let content_type = match format {
        KitFormat::Json => "application/json",
        KitFormat::Text => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type), (header::ETAG, &format!("\"{}\"", s.revision))], bytes).into_response())
}

async fn ingredients(State(state): State<Shared>, Query(q): Query<PrefixQuery>) -> Json<serde_json::Value> {
    let prefix = q.prefix.unwrap_or_default().to_lowercase();
    let limit = q.limit.unwrap_or(20);
    let matches: Vec<&String> = state.models.vocab().ingredients().iter().filter(|i| i.starts_with(&prefix)).take(limit).collect();
    Json(json!({ "prefix": prefix, "ingredients": matches }))
}

async fn dishes(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "dishes": state.models.vocab().dishes() }))
}

async fn upload() -> ApiError {
    ApiError::new(
        StatusCode::NOT_IMPLEMENTED,
        "NotImplemented",
        "image upload and feature extraction are not supported; create sessions from recipe_id or features_ref",
    )
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": state.session_count().await, "quarantined": state.quarantined }))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/dish", post(set_dish))
        .route("/sessions/{id}/next", post(next_ingredient))
        .route("/sessions/{id}/correct", post(correct))
        .route("/sessions/{id}/estimate", post(estimate))
        .route("/sessions/{id}/kit", get(get_kit))
        .route("/ingredients", get(ingredients))
        .route("/dishes", get(dishes))
        .route("/uploads", post(upload))
        .with_state(state)
}

pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

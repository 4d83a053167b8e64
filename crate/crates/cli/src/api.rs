//! JSON HTTP API under `/v1`, plus the session protocol over WebSocket.
//! All durable state lives in the data root; the in-memory maps only cache
//! loaded recordings and track running live sessions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{ws::WebSocketUpgrade, DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use seam_core::agent::AudioRates;
use seam_core::model::{Meeting, StandInConfig, Tick};
use seam_core::playback::{Contribution, SpliceOptions};
use seam_core::recorder::{load, Recording, RecordingManifest};
use seam_core::session::Session;
use seam_core::store::EntityStore;

use crate::config::Settings;
use crate::error::{CliError, ErrorBody};
use crate::live::{self, LiveHandle, StopPolicy};
use crate::service::{
    self, abridge_chain, contribution_from_media, decode_voice, splice_into_store, view_range, viewpoint_arg, AbridgeOutcome,
    CommentStore, RecordingSummary, SpliceOutcome, ViewPage,
};

/// Upload limit for comment audio.
pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub struct AppState {
    pub settings: Settings,
    pub store: EntityStore,
    recordings: Mutex<HashMap<String, Arc<Recording>>>,
    sessions: tokio::sync::Mutex<HashMap<(String, u32), LiveHandle>>,
}

impl AppState {
    pub fn new(settings: Settings) -> Arc<Self> {
        let store = EntityStore::open(&settings.data_root);
        Arc::new(Self { settings, store, recordings: Mutex::default(), sessions: tokio::sync::Mutex::default() })
    }

    fn recording(&self, id: &str) -> Result<(PathBuf, Arc<Recording>), CliError> {
        let entry = self.store.find_recording(id)?;
        if let Some(r) = self.recordings.lock().expect("cache lock").get(id) {
            return Ok((entry.dir, r.clone()));
        }
        let rec = Arc::new(load(&entry.dir)?);
        self.recordings.lock().expect("cache lock").insert(id.to_string(), rec.clone());
        Ok((entry.dir, rec))
    }
}

type Shared = Arc<AppState>;

impl IntoResponse for CliError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.kind.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { code: self.code, message: &self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, CliError>;

/// Runs filesystem-heavy work off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| CliError::io(format!("worker failed: {e}")))?
}

pub fn router(state: Shared) -> Router {
    let v1 = Router::new()
        .route("/meetings", get(list_meetings).post(create_meeting))
        .route("/meetings/{id}", get(get_meeting))
        .route("/meetings/{id}/standin/{pid}", get(get_standin).put(put_standin))
        .route("/recordings", get(list_recordings))
        .route("/recordings/{id}/manifest", get(get_manifest))
        .route("/recordings/{id}/view", get(get_view))
        .route("/recordings/{id}/comments", get(list_comments).post(post_comment))
        .route("/recordings/{id}/splice", post(post_splice))
        .route("/recordings/{id}/abridge", post(post_abridge))
        .route("/sessions/{id}", get(session_socket));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { CliError::not_found("no such route") })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn list_meetings(State(s): State<Shared>) -> ApiResult<Json<Vec<Meeting>>> {
    blocking(move || {
        let ids = s.store.list_meetings()?;
        Ok(Json(ids.iter().map(|id| s.store.load_meeting(id)).collect::<Result<_, _>>()?))
    })
    .await
}

fn json_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::invalid(format!("body: {e}")))
}

async fn create_meeting(State(s): State<Shared>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Meeting>)> {
    let meeting: Meeting = json_body(&body)?;
    blocking(move || {
        s.store.store_meeting(&meeting)?;
        Ok((StatusCode::CREATED, Json(meeting)))
    })
    .await
}

async fn get_meeting(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Meeting>> {
    blocking(move || Ok(Json(s.store.load_meeting(&id)?))).await
}

async fn get_standin(State(s): State<Shared>, Path((id, pid)): Path<(String, String)>) -> ApiResult<Json<StandInConfig>> {
    blocking(move || Ok(Json(s.store.load_standin(&id, &pid)?))).await
}

async fn put_standin(
    State(s): State<Shared>,
    Path((id, pid)): Path<(String, String)>,
    body: axum::body::Bytes,
) -> ApiResult<Json<StandInConfig>> {
    let config: StandInConfig = json_body(&body)?;
    if config.absentee_id != pid {
        return Err(CliError::invalid(format!("absentee_id {} does not match path {pid}", config.absentee_id)));
    }
    blocking(move || {
        s.store.store_standin(&id, &config)?;
        Ok(Json(config))
    })
    .await
}

async fn list_recordings(State(s): State<Shared>) -> ApiResult<Json<Vec<RecordingSummary>>> {
    blocking(move || Ok(Json(s.store.list_recordings()?.iter().map(RecordingSummary::from).collect()))).await
}

async fn get_manifest(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RecordingManifest>> {
    blocking(move || Ok(Json(s.store.find_recording(&id)?.manifest))).await
}

#[derive(Debug, Deserialize)]
pub struct ViewQuery {
    pub viewpoint: Option<String>,
    #[serde(default)]
    pub from: Tick,
    pub to: Option<Tick>,
    #[serde(default)]
    pub samples: bool,
}

async fn get_view(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Json<ViewPage>> {
    blocking(move || {
        let (_, rec) = s.recording(&id)?;
        let to = q.to.unwrap_or_else(|| q.from.saturating_add(service::MAX_VIEW_PAGE));
        Ok(Json(view_range(&rec, viewpoint_arg(q.viewpoint.as_deref()), q.from, to, q.samples)?))
    })
    .await
}

/// Metadata part of a comment upload.
#[derive(Debug, Deserialize)]
struct CommentMeta {
    #[serde(default)]
    id: Option<String>,
    author_id: String,
    anchor_tick: Tick,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    position: Option<[f32; 3]>,
    #[serde(default)]
    yaw: Option<f32>,
}

#[derive(Debug, Serialize)]
pub struct CommentSummary {
    pub contribution_id: String,
    pub author_id: String,
    pub anchor_tick: Tick,
    pub created_seq: u64,
    pub duration_ticks: Tick,
    pub utterances: usize,
}

impl From<&Contribution> for CommentSummary {
    fn from(c: &Contribution) -> Self {
        Self {
            contribution_id: c.contribution_id.clone(),
            author_id: c.author_id.clone(),
            anchor_tick: c.anchor_tick,
            created_seq: c.created_seq,
            duration_ticks: c.duration_ticks,
            utterances: c.utterances.len(),
        }
    }
}

async fn list_comments(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<CommentSummary>>> {
    blocking(move || {
        s.store.find_recording(&id)?;
        Ok(Json(CommentStore::new(&s.store, &id)?.pending()?.iter().map(CommentSummary::from).collect()))
    })
    .await
}

/// Multipart fields: `meta` (JSON) and optional `audio` (48 kHz mono WAV).
/// A `contribution` field holding a captured contribution is also accepted.
async fn post_comment(
    State(s): State<Shared>,
    Path(id): Path<String>,
    mut form: Multipart,
) -> ApiResult<(StatusCode, Json<CommentSummary>)> {
    let mut meta: Option<CommentMeta> = None;
    let mut audio: Option<Vec<u8>> = None;
    let mut captured: Option<Contribution> = None;
    while let Some(field) = form.next_field().await.map_err(|e| CliError::invalid(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| CliError::invalid(format!("multipart {name}: {e}")))?;
        match name.as_str() {
            "meta" => meta = Some(json_body(&bytes)?),
            "audio" | "wav" => audio = Some(bytes.to_vec()),
            "contribution" => captured = Some(json_body(&bytes)?),
            other => return Err(CliError::invalid(format!("unexpected multipart field {other:?}"))),
        }
    }
    blocking(move || {
        let (_, rec) = s.recording(&id)?;
        let rates = AudioRates { tick_rate: rec.manifest.tick_rate, sample_rate: rec.manifest.audio_sample_rate };
        let comments = CommentStore::new(&s.store, &id)?;
        let seq = comments.next_seq()?;
        let contribution = match (captured, meta) {
            (Some(mut c), _) => {
                c.created_seq = seq;
                c.validate(rates)?;
                c
            }
            (None, Some(m)) => {
                let samples = audio.as_deref().map(|b| decode_voice(b, rates)).transpose()?;
                contribution_from_media(
                    m.id.unwrap_or_else(|| format!("{}-{seq}", m.author_id)),
                    &m.author_id,
                    m.anchor_tick,
                    seq,
                    samples.as_deref(),
                    m.text.as_deref(),
                    m.position,
                    m.yaw,
                    s.settings.tts().as_ref(),
                    rates,
                )?
            }
            (None, None) => return Err(CliError::invalid("missing meta field")),
        };
        if contribution.anchor_tick > rec.duration_ticks() {
            return Err(CliError::invalid(format!("anchor {} beyond duration {}", contribution.anchor_tick, rec.duration_ticks())));
        }
        comments.add(&contribution)?;
        Ok((StatusCode::CREATED, Json(CommentSummary::from(&contribution))))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct SpliceQuery {
    #[serde(default)]
    pub listening: bool,
}

/// Splices every pending comment into the next iteration.
async fn post_splice(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<SpliceQuery>) -> ApiResult<(StatusCode, Json<SpliceOutcome>)> {
    blocking(move || {
        let entry = s.store.find_recording(&id)?;
        let comments = CommentStore::new(&s.store, &id)?;
        let pending = comments.pending()?;
        if pending.is_empty() {
            return Err(CliError::invalid("no pending comments"));
        }
        let out = splice_into_store(&s.store, &entry.dir, &pending, SpliceOptions { listening: q.listening })?;
        comments.archive(out.id.as_deref().unwrap_or("spliced"))?;
        Ok((StatusCode::CREATED, Json(out)))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct AbridgeQuery {
    pub viewer: String,
}

async fn post_abridge(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<AbridgeQuery>) -> ApiResult<Json<AbridgeOutcome>> {
    blocking(move || {
        let entry = s.store.find_recording(&id)?;
        Ok(Json(abridge_chain(&s.store, &s.settings, &entry.dir, &q.viewer)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    #[serde(default = "first_iteration")]
    pub iter: u32,
    #[serde(default)]
    pub seed: u64,
}

fn first_iteration() -> u32 {
    1
}

/// Joins (creating on first use) the live session for a meeting iteration.
/// The session records until its last participant leaves.
async fn session_socket(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<SessionQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let handle = live_session(&s, &id, q.iter, q.seed).await?;
    Ok(ws.on_upgrade(move |socket| live::serve_ws_client(socket, handle)))
}

async fn live_session(s: &Shared, meeting_id: &str, iter: u32, seed: u64) -> ApiResult<LiveHandle> {
    let key = (meeting_id.to_string(), iter);
    // Held across creation so concurrent joins share one session.
    let mut sessions = s.sessions.lock().await;
    if let Some(h) = sessions.get(&key) {
        if !h.is_closed() {
            return Ok(h.clone());
        }
    }
    let st = s.clone();
    let id = meeting_id.to_string();
    let session = blocking(move || {
        let meeting = st.store.load_meeting(&id)?;
        let standins = service::standins_for_iteration(&st.store, &meeting, iter)?;
        Ok(Session::create(meeting, iter, standins, seed, &st.store.recordings_dir(), st.settings.session_options())?)
    })
    .await?;
    let (handle, done) = live::spawn(session, StopPolicy { max_ticks: None, close_when_empty: true });
    tokio::spawn(async move {
        match done.await {
            Ok(Ok(f)) => log::info!("recorded {} ({} ticks)", f.recording_dir.display(), f.ticks),
            Ok(Err(e)) => log::warn!("session failed: {e}"),
            Err(e) => log::warn!("session task failed: {e}"),
        }
    });
    sessions.insert(key, handle.clone());
    Ok(handle)
}

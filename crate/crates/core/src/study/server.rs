//! Session HTTP API for live studies.
//!
//! Image URLs use opaque keys so the page never learns method names, and the
//! client reports `left`/`right`; the server maps that back to A/B.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{sanity_check, schedule_trials, Choice, SanityResult, TrialSchedule, VoteLog, VoteRecord};
use crate::dataio::{entry_path, CorpusManifest, Role};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub sanity_rate: f64,
    pub min_consistency: f64,
    pub seed: u64,
    /// Restricts the study to these methods; all enhanced methods when empty.
    #[serde(default)]
    pub methods: Vec<String>,
}

struct Session {
    subject_id: String,
    schedule: TrialSchedule,
    answered: usize,
    votes: Vec<VoteRecord>,
}

pub struct StudyServer {
    config: StudyConfig,
    contents: Vec<String>,
    methods: Vec<String>,
    /// (content, method) -> image key
    keys: HashMap<(String, String), String>,
    images: HashMap<String, PathBuf>,
    log: VoteLog,
    sessions: Mutex<HashMap<String, Session>>,
    ui_dir: Option<PathBuf>,
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

impl StudyServer {
    pub fn new(
        manifest: &CorpusManifest,
        root: &Path,
        config: StudyConfig,
        log: VoteLog,
        ui_dir: Option<PathBuf>,
    ) -> Result<Self> {
        if !(0.0..=0.2).contains(&config.sanity_rate) {
            return Err(Error::config("sanity_rate", "must lie in [0, 0.2]"));
        }
        if !(0.0..=1.0).contains(&config.min_consistency) {
            return Err(Error::config("min_consistency", "must lie in [0, 1]"));
        }
        let mut keys = HashMap::new();
        let mut images = HashMap::new();
        let mut methods = std::collections::BTreeSet::new();
        for e in manifest.with_role(Role::Enhanced) {
            let Some(method) = &e.method_id else { continue };
            if !config.methods.is_empty() && !config.methods.contains(method) {
                continue;
            }
            let key = short_hash(&[&config.study_id, &e.content_id, method]);
            keys.insert((e.content_id.clone(), method.clone()), key.clone());
            images.insert(key, entry_path(root, e));
            methods.insert(method.clone());
        }
        for m in &config.methods {
            if !methods.contains(m) {
                return Err(Error::UnknownMethod(m.clone()));
            }
        }
        let methods: Vec<String> = methods.into_iter().collect();
        let contents = manifest.content_ids();
        for c in &contents {
            for m in &methods {
                if !keys.contains_key(&(c.clone(), m.clone())) {
                    return Err(Error::InvalidArgument(format!("content `{c}` lacks method `{m}`")));
                }
            }
        }
        Ok(StudyServer {
            config,
            contents,
            methods,
            keys,
            images,
            log,
            sessions: Mutex::new(HashMap::new()),
            ui_dir,
        })
    }

    pub fn votes(&self) -> Vec<VoteRecord> {
        self.log.records()
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    fn token(&self, session: &str, index: usize) -> String {
        format!("{index}.{}", short_hash(&[session, &index.to_string()]))
    }

    fn parse_token(&self, session: &str, token: &str) -> Option<usize> {
        let (idx, _) = token.split_once('.')?;
        let index: usize = idx.parse().ok()?;
        (self.token(session, index) == token).then_some(index)
    }

    fn create_session(&self, subject: Option<String>) -> std::result::Result<CreatedSession, ApiError> {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        let subject_id = match subject {
            Some(s) if s.trim().is_empty() => return Err(ApiError::bad("subject_id must not be empty")),
            Some(s) => s,
            None => format!("subject{:03}", sessions.len() + 1),
        };
        if sessions.values().any(|s| s.subject_id == subject_id) {
            return Err(ApiError::conflict(format!("subject `{subject_id}` already has a session")));
        }
        let schedule = schedule_trials(
            &self.contents,
            &self.methods,
            &subject_id,
            self.config.sanity_rate,
            self.config.seed,
        )
        .map_err(ApiError::from)?;
        let session_id = short_hash(&[&self.config.study_id, &subject_id, "session"]);
        let schedule_id = short_hash(&[&session_id, &schedule.seed.to_string()]);
        let total = schedule.trials.len();
        sessions.insert(
            session_id.clone(),
            Session {
                subject_id: subject_id.clone(),
                schedule,
                answered: 0,
                votes: Vec::new(),
            },
        );
        Ok(CreatedSession {
            session_id,
            subject_id,
            schedule_id,
            total,
        })
    }

    fn next_trial(&self, session_id: &str) -> std::result::Result<NextTrial, ApiError> {
        let sessions = self.sessions.lock().expect("session table poisoned");
        let s = sessions.get(session_id).ok_or_else(ApiError::no_session)?;
        let total = s.schedule.trials.len();
        let Some(trial) = s.schedule.trials.get(s.answered) else {
            return Ok(NextTrial {
                done: true,
                trial_token: None,
                left_image_url: None,
                right_image_url: None,
                index: total,
                total,
            });
        };
        let url = |m: &str| format!("/images/{}", self.keys[&(trial.content_id.clone(), m.to_string())]);
        let (left, right) = match trial.presented_left {
            Choice::A => (&trial.method_a, &trial.method_b),
            Choice::B => (&trial.method_b, &trial.method_a),
        };
        Ok(NextTrial {
            done: false,
            trial_token: Some(self.token(session_id, s.answered)),
            left_image_url: Some(url(left)),
            right_image_url: Some(url(right)),
            index: s.answered,
            total,
        })
    }

    fn submit(&self, session_id: &str, body: VoteBody) -> std::result::Result<VoteReply, ApiError> {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        let s = sessions.get_mut(session_id).ok_or_else(ApiError::no_session)?;
        let index = self
            .parse_token(session_id, &body.trial_token)
            .filter(|&i| i < s.schedule.trials.len())
            .ok_or_else(|| ApiError::bad("unknown trial token"))?;
        if index < s.answered {
            return Ok(VoteReply {
                sequence: None,
                duplicate: true,
                remaining: s.schedule.trials.len() - s.answered,
            });
        }
        if index > s.answered {
            return Err(ApiError::conflict("trial is not the session's current trial"));
        }
        if body.elapsed_ms == 0 {
            return Err(ApiError::bad("elapsed_ms must be positive"));
        }
        let trial = &s.schedule.trials[index];
        let choice = match body.choice {
            Side::Left => trial.presented_left,
            Side::Right => trial.presented_left.other(),
        };
        let record = VoteRecord {
            study_id: self.config.study_id.clone(),
            subject_id: s.subject_id.clone(),
            content_id: trial.content_id.clone(),
            method_a: trial.method_a.clone(),
            method_b: trial.method_b.clone(),
            choice,
            presented_left: trial.presented_left,
            elapsed_ms: body.elapsed_ms,
            is_sanity: trial.is_sanity,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let ack = self.log.record_vote(record.clone()).map_err(ApiError::from)?;
        s.answered += 1;
        s.votes.push(record);
        Ok(VoteReply {
            sequence: Some(ack.sequence),
            duplicate: false,
            remaining: s.schedule.trials.len() - s.answered,
        })
    }

    fn status(&self, session_id: &str) -> std::result::Result<SessionStatus, ApiError> {
        let sessions = self.sessions.lock().expect("session table poisoned");
        let s = sessions.get(session_id).ok_or_else(ApiError::no_session)?;
        let total = s.schedule.trials.len();
        let complete = s.answered == total;
        let sanity = if complete {
            match sanity_check(&s.votes, self.config.min_consistency) {
                Ok(r) => Some(r),
                Err(Error::NoSanityTrials) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        Ok(SessionStatus {
            subject_id: s.subject_id.clone(),
            answered: s.answered,
            total,
            complete,
            sanity,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub subject_id: String,
    pub schedule_id: String,
    pub total: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBody {
    #[serde(default)]
    pub subject_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextTrial {
    pub done: bool,
    pub trial_token: Option<String>,
    pub left_image_url: Option<String>,
    pub right_image_url: Option<String>,
    pub index: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteBody {
    pub trial_token: String,
    pub choice: Side,
    pub elapsed_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteReply {
    pub sequence: Option<u64>,
    pub duplicate: bool,
    pub remaining: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionStatus {
    pub subject_id: String,
    pub answered: usize,
    pub total: usize,
    pub complete: bool,
    pub sanity: Option<SanityResult>,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: msg.into(),
        }
    }

    fn conflict(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            message: msg.into(),
        }
    }

    fn no_session() -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: "no such session".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DuplicateTrial(_) => StatusCode::CONFLICT,
            ref e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type Shared = Arc<StudyServer>;

async fn create(State(st): State<Shared>, body: Option<Json<CreateBody>>) -> Response {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    match st.create_session(body.subject_id) {
        Ok(c) => (StatusCode::CREATED, Json(c)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn next(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match st.next_trial(&id) {
        Ok(t) => Json(t).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn vote(State(st): State<Shared>, UrlPath(id): UrlPath<String>, body: Json<VoteBody>) -> Response {
    // the log append syncs to disk, so keep it off the async workers
    let result = tokio::task::spawn_blocking(move || st.submit(&id, body.0)).await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
        .into_response(),
    }
}

async fn status(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match st.status(&id) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn image(State(st): State<Shared>, UrlPath(key): UrlPath<String>) -> Response {
    match st.images.get(&key) {
        Some(path) => send_file(path.clone()).await,
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

/// Resolves a request path inside `root`, refusing anything but plain components.
fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.components().all(|c| matches!(c, Component::Normal(_))) {
        Some(root.join(rel))
    } else {
        None
    }
}

async fn ui_file(State(st): State<Shared>, UrlPath(rel): UrlPath<String>) -> Response {
    match st.ui_dir.as_deref().and_then(|d| safe_join(d, &rel)) {
        Some(p) => send_file(p).await,
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn ui_index(State(st): State<Shared>) -> Response {
    match &st.ui_dir {
        Some(d) => send_file(d.join("index.html")).await,
        None => (StatusCode::OK, "study server running\n").into_response(),
    }
}

pub fn router(server: Arc<StudyServer>) -> Router {
    Router::new()
        .route("/", get(ui_index))
        .route("/ui/{*path}", get(ui_file))
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/votes", post(vote))
        .route("/sessions/{id}/status", get(status))
        .route("/images/{key}", get(image))
        .with_state(server)
}

/// Serves until the process is stopped.
pub async fn serve(server: Arc<StudyServer>, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("127.0.0.1:{port}"), e))?;
    log::info!("study server listening on http://{addr}");
    axum::serve(listener, router(server))
        .await
        .map_err(|e| Error::io(format!("127.0.0.1:{port}"), e))
}

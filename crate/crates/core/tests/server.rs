use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use percept_core::dataio::{generate_degraded_corpus, synth_base_images, CorpusManifest, DegradationConfig};
use percept_core::study::server::{router, StudyConfig, StudyServer};
use percept_core::study::{aggregate, parse_vote_log, Choice, VoteLog};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    manifest: CorpusManifest,
}

/// Three contents, four methods.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = DegradationConfig::default_recipes();
    cfg.recipes.truncate(4);
    let base = synth_base_images(3, 32, 32, 1).unwrap();
    let manifest = generate_degraded_corpus(&base, &cfg, 1, dir.path().join("corpus")).unwrap();
    Fixture { dir, manifest }
}

fn config(sanity_rate: f64) -> StudyConfig {
    StudyConfig {
        study_id: "st".into(),
        sanity_rate,
        min_consistency: 0.8,
        seed: 9,
        methods: Vec::new(),
    }
}

fn app(f: &Fixture, sanity_rate: f64, log: VoteLog) -> (Arc<StudyServer>, Router) {
    let server = Arc::new(
        StudyServer::new(
            &f.manifest,
            &f.dir.path().join("corpus"),
            config(sanity_rate),
            log,
            Some(f.dir.path().join("ui")),
        )
        .unwrap(),
    );
    (server.clone(), router(server))
}

async fn raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, subject: &str) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "subject_id": subject }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn next(app: &Router, session: &str) -> Value {
    let (s, v) = call(app, "GET", &format!("/sessions/{session}/next"), None).await;
    assert_eq!(s, StatusCode::OK);
    v
}

async fn vote(app: &Router, session: &str, token: &str, choice: &str, elapsed: u64) -> (StatusCode, Value) {
    let body = json!({ "trial_token": token, "choice": choice, "elapsed_ms": elapsed });
    call(app, "POST", &format!("/sessions/{session}/votes"), Some(body)).await
}

/// Answers every trial, picking the side whose image URL sorts first so that
/// repeated trials get consistent answers.
async fn complete(app: &Router, session: &str) -> usize {
    let mut n = 0;
    loop {
        let t = next(app, session).await;
        if t["done"].as_bool().unwrap() {
            return n;
        }
        let side = if t["left_image_url"].as_str() < t["right_image_url"].as_str() {
            "left"
        } else {
            "right"
        };
        let (s, r) = vote(app, session, t["trial_token"].as_str().unwrap(), side, 1500).await;
        assert_eq!(s, StatusCode::OK, "{r}");
        assert_eq!(r["duplicate"], false);
        n += 1;
    }
}

#[tokio::test]
async fn full_session_covers_every_pair_once() {
    let f = fixture();
    let (server, app) = app(&f, 0.2, VoteLog::in_memory());
    let session = create(&app, "alice").await;
    let answered = complete(&app, &session).await;

    let votes = server.votes();
    assert_eq!(votes.len(), answered);
    let regular: Vec<_> = votes.iter().filter(|v| !v.is_sanity).collect();
    assert_eq!(regular.len(), 3 * 6, "3 contents x C(4,2) pairs");
    let pairs: BTreeSet<_> = regular
        .iter()
        .map(|v| {
            let mut p = [v.method_a.clone(), v.method_b.clone()];
            p.sort();
            (v.content_id.clone(), p)
        })
        .collect();
    assert_eq!(pairs.len(), 18);
    assert!(votes.iter().any(|v| v.is_sanity));
    for v in &votes {
        v.validate().unwrap();
    }

    let (s, st) = call(&app, "GET", &format!("/sessions/{session}/status"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(st["complete"], true);
    assert_eq!(st["sanity"]["passed"], true, "{st}");

    let agg = aggregate(&votes, 0.8).unwrap();
    assert_eq!(agg.scores.len(), 3 * 4);
    assert!(agg.excluded_sessions.is_empty());
}

#[tokio::test]
async fn left_and_right_map_to_the_presented_methods() {
    let f = fixture();
    let (server, app) = app(&f, 0.0, VoteLog::in_memory());
    let session = create(&app, "bob").await;
    for side in ["left", "right", "left", "right"] {
        let t = next(&app, &session).await;
        let (s, _) = vote(&app, &session, t["trial_token"].as_str().unwrap(), side, 900).await;
        assert_eq!(s, StatusCode::OK);
        let rec = server.votes().pop().unwrap();
        let expected = if side == "left" {
            rec.presented_left
        } else {
            rec.presented_left.other()
        };
        assert_eq!(rec.choice, expected);
        // the URL the subject saw on that side belongs to the chosen method
        let chosen = match rec.choice {
            Choice::A => &rec.method_a,
            Choice::B => &rec.method_b,
        };
        let url = t[format!("{side}_image_url")].as_str().unwrap();
        let (s, bytes) = raw(&app, "GET", url, None).await;
        assert_eq!(s, StatusCode::OK);
        let file = f.dir.path().join(format!("corpus/{}/{chosen}.png", rec.content_id));
        assert_eq!(bytes, std::fs::read(file).unwrap());
    }
}

#[tokio::test]
async fn urls_do_not_reveal_methods() {
    let f = fixture();
    let (server, app) = app(&f, 0.0, VoteLog::in_memory());
    let session = create(&app, "carol").await;
    let t = next(&app, &session).await;
    for key in ["left_image_url", "right_image_url", "trial_token"] {
        let s = t[key].as_str().unwrap();
        for m in server.methods() {
            assert!(!s.contains(m.as_str()), "{key} = {s} reveals {m}");
        }
        assert!(!s.contains("c000"));
    }
}

#[tokio::test]
async fn refresh_returns_the_same_trial() {
    let f = fixture();
    let (_, app) = app(&f, 0.1, VoteLog::in_memory());
    let session = create(&app, "dave").await;
    let a = next(&app, &session).await;
    let b = next(&app, &session).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn resubmitting_a_token_is_idempotent() {
    let f = fixture();
    let (server, app) = app(&f, 0.1, VoteLog::in_memory());
    let session = create(&app, "erin").await;
    let t = next(&app, &session).await;
    let token = t["trial_token"].as_str().unwrap();
    let (s, first) = vote(&app, &session, token, "left", 700).await;
    assert_eq!((s, first["duplicate"].as_bool()), (StatusCode::OK, Some(false)));
    let (s, again) = vote(&app, &session, token, "right", 700).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["duplicate"], true);
    assert_eq!(again["remaining"], first["remaining"]);
    assert_eq!(server.votes().len(), 1);
}

#[tokio::test]
async fn bad_votes_are_rejected() {
    let f = fixture();
    let (server, app) = app(&f, 0.1, VoteLog::in_memory());
    let session = create(&app, "frank").await;
    let t = next(&app, &session).await;
    let token = t["trial_token"].as_str().unwrap().to_string();

    let (s, _) = vote(&app, &session, &token, "left", 0).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, body) = vote(&app, &session, "0.deadbeef", "left", 500).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());
    let (s, _) = vote(&app, &session, "garbage", "left", 500).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = vote(&app, "nope", &token, "left", 500).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let body = json!({ "trial_token": token, "choice": "up", "elapsed_ms": 5 });
    let (s, _) = raw(&app, "POST", &format!("/sessions/{session}/votes"), Some(body)).await;
    assert!(s.is_client_error());
    assert!(server.votes().is_empty());
}

#[tokio::test]
async fn a_token_from_ahead_of_the_session_conflicts() {
    let f = fixture();
    // session ids derive from study and subject, so a second server hands
    // the same subject the same session id starting from trial 0
    let (_, first) = app(&f, 0.1, VoteLog::in_memory());
    let session = create(&first, "kim").await;
    for _ in 0..2 {
        let t = next(&first, &session).await;
        vote(&first, &session, t["trial_token"].as_str().unwrap(), "left", 600).await;
    }
    let ahead = next(&first, &session).await["trial_token"].as_str().unwrap().to_string();

    let (server, second) = app(&f, 0.1, VoteLog::in_memory());
    assert_eq!(create(&second, "kim").await, session);
    let (s, _) = vote(&second, &session, &ahead, "left", 600).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(server.votes().is_empty());
}

#[tokio::test]
async fn sessions_are_unique_per_subject() {
    let f = fixture();
    let (_, app) = app(&f, 0.1, VoteLog::in_memory());
    create(&app, "henry").await;
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "subject_id": "henry" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("henry"));
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "subject_id": "  " }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // an anonymous session gets a generated subject id
    let (s, v) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(!v["subject_id"].as_str().unwrap().is_empty());
}

#[tokio::test]
async fn unknown_resources_are_404() {
    let f = fixture();
    std::fs::create_dir_all(f.dir.path().join("ui")).unwrap();
    std::fs::write(f.dir.path().join("ui/index.html"), "<html></html>").unwrap();
    std::fs::write(f.dir.path().join("secret.txt"), "x").unwrap();
    let (_, app) = app(&f, 0.1, VoteLog::in_memory());
    for uri in ["/images/0000", "/sessions/none/next", "/sessions/none/status", "/ui/..%2Fsecret.txt", "/ui/missing.js"] {
        let (s, _) = raw(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
    let (s, body) = raw(&app, "GET", "/", None).await;
    assert_eq!((s, body), (StatusCode::OK, b"<html></html>".to_vec()));
    let (s, _) = raw(&app, "GET", "/ui/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn log_file_survives_a_restart() {
    let f = fixture();
    let path = f.dir.path().join("votes.jsonl");
    {
        let (_, app) = app(&f, 0.1, VoteLog::open(&path).unwrap());
        let session = create(&app, "ivy").await;
        for _ in 0..3 {
            let t = next(&app, &session).await;
            vote(&app, &session, t["trial_token"].as_str().unwrap(), "left", 800).await;
        }
    }
    let on_disk = parse_vote_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(on_disk.len(), 3);
    let reopened = VoteLog::open(&path).unwrap();
    assert_eq!(reopened.records(), on_disk);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_do_not_interfere() {
    let f = fixture();
    let path = f.dir.path().join("votes.jsonl");
    let (server, app) = app(&f, 0.2, VoteLog::open(&path).unwrap());
    let mut tasks = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let session = create(&app, &format!("subject{i}")).await;
            complete(&app, &session).await
        }));
    }
    let mut total = 0;
    for t in tasks {
        total += t.await.unwrap();
    }
    let votes = server.votes();
    assert_eq!(votes.len(), total);
    let mut per_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for v in &votes {
        *per_subject.entry(&v.subject_id).or_default() += usize::from(!v.is_sanity);
    }
    assert_eq!(per_subject.len(), 8);
    assert!(per_subject.values().all(|&n| n == 18));
    let on_disk = parse_vote_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(on_disk.len(), total);
}

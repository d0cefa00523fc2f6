mod common;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use slim::service::{router, AppState};
use slim::session::SessionStore;
use slim::slim_core::embed::{EmbedMethod, Embedding};
use slim::slim_core::linalg::Matrix;
use slim::slim_core::spread::{spread_labels, AttentionValue, LabelSource, SpreadConfig};
use slim::store::Store;
use tower::ServiceExt;

fn app(dir: &std::path::Path, ui: Option<std::path::PathBuf>) -> Router {
    router(Arc::new(AppState::new(Store::new(dir), ui).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, ids: &[&str]) -> String {
    let (s, v) = json_call(app, "POST", "/sessions", Some(json!({ "ids": ids }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn label(app: &Router, sid: &str, id: &str, value: &str) -> StatusCode {
    json_call(app, "POST", &format!("/sessions/{sid}/labels"), Some(json!({ "id": id, "value": value }))).await.0
}

async fn status(app: &Router, sid: &str) -> Value {
    let (s, v) = json_call(app, "GET", &format!("/sessions/{sid}/status"), None).await;
    assert_eq!(s, StatusCode::OK);
    v
}

#[tokio::test]
async fn create_deduplicates_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let app = app(dir.path(), None);
    let sid = create(&app, &["c", "a", "c", "b"]).await;
    let st = status(&app, &sid).await;
    assert_eq!((st["total"].as_u64(), st["labeled"].as_u64(), st["state"].as_str()), (Some(3), Some(0), Some("open")));
    let (s, _) = json_call(&app, "POST", "/sessions", Some(json!({ "ids": ["a", "nope"] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json_call(&app, "POST", "/sessions", Some(json!({ "ids": [] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // Without ids the representatives are used, and there are none yet.
    let (s, v) = json_call(&app, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert!(v["error"].as_str().unwrap().contains("sample"));
}

#[tokio::test]
async fn queue_order_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let app = app(dir.path(), None);
    let sid = create(&app, &["a", "b", "c"]).await;

    let (s, next) = json_call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(next["id"], "a");
    assert_eq!(next["done"], false);
    assert_eq!(next["label_class_name"], "cat");
    assert_eq!(next["image_ref"], "/images/a");
    assert_eq!(next["attribution"], json!([[1.0, 0.5], [0.0, 0.0]]));

    assert_eq!(label(&app, &sid, "b", "incorrect").await, StatusCode::OK);
    let (_, next) = json_call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(next["id"], "a");

    assert_eq!(label(&app, &sid, "b", "correct").await, StatusCode::CONFLICT);
    assert_eq!(label(&app, &sid, "d", "correct").await, StatusCode::BAD_REQUEST);
    assert_eq!(label(&app, &sid, "a", "maybe").await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(label(&app, "s9999", "a", "correct").await, StatusCode::NOT_FOUND);
    assert_eq!(json_call(&app, "GET", "/sessions/../next", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(json_call(&app, "GET", "/sessions/s9999/status", None).await.0, StatusCode::NOT_FOUND);

    assert_eq!(label(&app, &sid, "a", "correct").await, StatusCode::OK);
    let (_, next) = json_call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(next["id"], "c");
    assert_eq!(next["image_ref"], Value::Null);
    assert_eq!(label(&app, &sid, "c", "correct").await, StatusCode::OK);
    let (_, next) = json_call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(next, json!({ "done": true }));
    let st = status(&app, &sid).await;
    assert_eq!((st["labeled"].as_u64(), st["state"].as_str()), (Some(3), Some("complete")));
}

#[tokio::test]
async fn labels_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let first = app(dir.path(), None);
    let sid = create(&first, &["a", "b", "c"]).await;
    assert_eq!(label(&first, &sid, "c", "incorrect").await, StatusCode::OK);
    assert_eq!(label(&first, &sid, "a", "correct").await, StatusCode::OK);
    let before = status(&first, &sid).await;
    drop(first);

    let second = app(dir.path(), None);
    assert_eq!(status(&second, &sid).await, before);
    assert_eq!(label(&second, &sid, "a", "correct").await, StatusCode::CONFLICT);
    let (_, next) = json_call(&second, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(next["id"], "b");

    let s = SessionStore::new(dir.path().join("sessions")).open(&sid).unwrap();
    let got: Vec<(&str, AttentionValue)> = s.labels().iter().map(|l| (l.id.as_str(), l.value)).collect();
    assert_eq!(got, [("c", AttentionValue::Incorrect), ("a", AttentionValue::Correct)]);
    assert!(s.labels().iter().all(|l| l.source == LabelSource::Human));
}

#[tokio::test]
async fn torn_final_line_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let sessions = SessionStore::new(dir.path().join("sessions"));
    let manifest = Store::new(dir.path()).manifest().unwrap();
    let mut s = sessions.create(vec!["a".into(), "b".into()], &manifest).unwrap();
    s.submit("a", AttentionValue::Correct, LabelSource::Human).unwrap();
    let log = dir.path().join("sessions").join(s.id()).join("labels.jsonl");
    OpenOptions::new().append(true).open(&log).unwrap().write_all(br#"{"id":"b","val"#).unwrap();

    let app = app(dir.path(), None);
    let st = status(&app, s.id()).await;
    assert_eq!(st["labeled"], 1);
    assert_eq!(label(&app, s.id(), "b", "incorrect").await, StatusCode::OK);
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    let again = sessions.open(s.id()).unwrap();
    assert_eq!(again.status().labeled, 2);
}

#[tokio::test]
async fn replay_rebuilds_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let sessions = SessionStore::new(dir.path().join("sessions"));
    let manifest = Store::new(dir.path()).manifest().unwrap();
    let mut s = sessions.create(vec!["d".into(), "b".into(), "a".into()], &manifest).unwrap();
    s.submit("b", AttentionValue::Incorrect, LabelSource::Human).unwrap();
    s.submit("d", AttentionValue::Correct, LabelSource::Oracle).unwrap();
    let r = sessions.open(s.id()).unwrap();
    assert_eq!(r.labels(), s.labels());
    assert_eq!(r.status(), s.status());
    assert_eq!(r.next(), Some("a"));
    assert_eq!(sessions.list(), vec![s.id().to_string()]);
}

#[tokio::test]
async fn sessions_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let app = app(dir.path(), None);
    let ids = ["a", "b", "c", "d"];
    let s1 = create(&app, &ids).await;
    let s2 = create(&app, &ids).await;
    assert_ne!(s1, s2);
    let mut tasks = Vec::new();
    for (sid, value) in [(s1.clone(), "correct"), (s2.clone(), "incorrect")] {
        for id in ids {
            let app = app.clone();
            let sid = sid.clone();
            tasks.push(tokio::spawn(async move { label(&app, &sid, id, value).await }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    for sid in [&s1, &s2] {
        assert_eq!(status(&app, sid).await["state"], "complete");
    }
}

#[tokio::test]
async fn images_and_ui_files() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let ui = dir.path().join("ui");
    fs::create_dir_all(&ui).unwrap();
    fs::write(ui.join("index.html"), "<p>hi</p>").unwrap();
    let app = app(dir.path(), Some(ui));
    let (s, body) = call(&app, "GET", "/images/a", None).await;
    assert_eq!((s, body.as_slice()), (StatusCode::OK, b"\x89PNG fake".as_slice()));
    assert_eq!(call(&app, "GET", "/images/b", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/images/zzz", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/ui/", None).await, (StatusCode::OK, b"<p>hi</p>".to_vec()));
    assert_eq!(call(&app, "GET", "/ui/index.html", None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", "/ui/../store.json", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/ui/missing.js", None).await.0, StatusCode::NOT_FOUND);
}

#[test]
fn spreading_ignores_submission_order() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let sessions = SessionStore::new(dir.path().join("sessions"));
    let manifest = Store::new(dir.path()).manifest().unwrap();
    let answers = [("a", AttentionValue::Correct), ("b", AttentionValue::Incorrect), ("c", AttentionValue::Correct)];
    let mut forward = sessions.create(vec!["a".into(), "b".into(), "c".into()], &manifest).unwrap();
    let mut backward = sessions.create(vec!["a".into(), "b".into(), "c".into()], &manifest).unwrap();
    for (id, v) in answers {
        forward.submit(id, v, LabelSource::Human).unwrap();
    }
    for (id, v) in answers.iter().rev() {
        backward.submit(id, *v, LabelSource::Human).unwrap();
    }
    let coords = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
    let e = Embedding::from_parts(vec!["a".into(), "b".into(), "c".into(), "d".into()], coords, 0, EmbedMethod::Pca)
        .unwrap();
    let cfg = SpreadConfig::default();
    let x = spread_labels(&e, forward.labels(), &cfg).unwrap();
    let y = spread_labels(&e, backward.labels(), &cfg).unwrap();
    assert_eq!(x, y);
}

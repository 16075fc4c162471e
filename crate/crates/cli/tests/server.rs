//! The review API over a real socket.

use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use flawfic_cli::server::{serve, AppState, Session};

fn tasks_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/annotation/tasks.jsonl")
}

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    fn start(votes: &Path, token: Option<&str>, static_dir: Option<PathBuf>) -> Server {
        let session = Session::open(&tasks_fixture(), votes).unwrap();
        let state = AppState::new(session, token.map(String::from), static_dir);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, state, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Server { base: format!("http://{addr}"), stop: Some(stop), thread: Some(thread) }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn vote(client: &Client, server: &Server, task: &str, annotator: &str, verdict: &str) -> (StatusCode, Value) {
    let r = client
        .post(server.url(&format!("/api/tasks/{task}/vote")))
        .json(&json!({ "annotator": annotator, "verdict": verdict }))
        .send()
        .unwrap();
    (r.status(), r.json().unwrap())
}

fn get(client: &Client, url: &str) -> (StatusCode, Value) {
    let r = client.get(url).send().unwrap();
    (r.status(), r.json().unwrap())
}

#[test]
fn next_task_carries_highlights() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), None, None);
    let client = Client::new();
    let (status, body) = get(&client, &server.url("/api/tasks/next?annotator=ana"));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["done"], false);
    let task = &body["task"];
    assert_eq!(task["task_id"], "lighthouse-p1");
    let sentences = task["sentences"].as_array().unwrap();
    let errors = task["error_indices"].as_array().unwrap();
    let contradicted = task["contradicted_indices"].as_array().unwrap();
    assert!(!errors.is_empty() && !contradicted.is_empty());
    for i in errors.iter().chain(contradicted) {
        assert!((i.as_u64().unwrap() as usize) < sentences.len());
    }
    assert!(!task["explanation"].as_str().unwrap().is_empty());
    assert_eq!(body["progress"]["tasks"], 3);

    let (status, _) = get(&client, &server.url("/api/tasks/next"));
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn votes_resolve_and_conflicts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), None, None);
    let client = Client::new();

    let (status, body) = vote(&client, &server, "lighthouse-p1", "ana", "legitimate");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["resolution"], "pending");

    let (status, _) = vote(&client, &server, "lighthouse-p1", "ana", "unsure");
    assert_eq!(status, StatusCode::CONFLICT, "second vote by the same annotator");

    vote(&client, &server, "lighthouse-p1", "ben", "legitimate");
    let (status, body) = vote(&client, &server, "lighthouse-p1", "chidi", "not_legitimate");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["resolution"], "accepted");
    assert_eq!(body["progress"]["accepted"], 1);

    let (status, _) = vote(&client, &server, "lighthouse-p1", "dana", "legitimate");
    assert_eq!(status, StatusCode::CONFLICT, "task already resolved");

    let (status, _) = vote(&client, &server, "no-such-task", "ana", "legitimate");
    assert_eq!(status, StatusCode::NOT_FOUND);

    // Resolved and already-voted tasks are skipped.
    let (_, body) = get(&client, &server.url("/api/tasks/next?annotator=dana"));
    assert_eq!(body["task"]["task_id"], "bakery-p1");

    let (status, p) = get(&client, &server.url("/api/progress"));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(p, json!({ "tasks": 3, "pending": 2, "accepted": 1, "rejected": 0, "votes": 3 }));
}

#[test]
fn malformed_votes_are_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), None, None);
    let client = Client::new();
    let url = server.url("/api/tasks/lighthouse-p1/vote");
    for body in [
        r#"{"annotator":"ana","verdict":"maybe"}"#,
        r#"{"annotator":"ana"}"#,
        "not json",
        r#"{"annotator":" ","verdict":"unsure"}"#,
    ] {
        let r = client.post(&url).header("content-type", "application/json").body(body).send().unwrap();
        assert_eq!(r.status(), StatusCode::BAD_REQUEST, "{body}");
    }
    let (_, p) = get(&client, &server.url("/api/progress"));
    assert_eq!(p["votes"], 0);
}

#[test]
fn token_guards_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), Some("s3cret"), None);
    let client = Client::new();
    for path in ["/api/progress", "/api/tasks/next?annotator=ana", "/api/progress?token=wrong"] {
        assert_eq!(client.get(server.url(path)).send().unwrap().status(), StatusCode::UNAUTHORIZED, "{path}");
    }
    let r = client
        .post(server.url("/api/tasks/lighthouse-p1/vote"))
        .json(&json!({ "annotator": "ana", "verdict": "legitimate" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = client
        .post(server.url("/api/tasks/lighthouse-p1/vote?token=s3cret"))
        .json(&json!({ "annotator": "ana", "verdict": "legitimate" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(get(&client, &server.url("/api/progress?token=s3cret")).0, StatusCode::OK);
}

#[test]
fn restart_replays_the_vote_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    let client = Client::new();
    {
        let server = Server::start(&log, None, None);
        for who in ["ana", "ben", "chidi"] {
            vote(&client, &server, "lighthouse-p1", who, "legitimate");
        }
        vote(&client, &server, "bakery-p1", "ana", "unsure");
    }
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

    let server = Server::start(&log, None, None);
    let (_, p) = get(&client, &server.url("/api/progress"));
    assert_eq!(p, json!({ "tasks": 3, "pending": 2, "accepted": 1, "rejected": 0, "votes": 4 }));
    let (_, body) = get(&client, &server.url("/api/tasks/next?annotator=ana"));
    assert_eq!(body["task"]["task_id"], "clockmaker-p2");
    let (status, _) = vote(&client, &server, "bakery-p1", "ana", "legitimate");
    assert_eq!(status, StatusCode::CONFLICT);
}

#[test]
fn finished_annotator_is_told_so() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), None, None);
    let client = Client::new();
    for task in ["lighthouse-p1", "bakery-p1", "clockmaker-p2"] {
        vote(&client, &server, task, "ana", "unsure");
    }
    let (_, body) = get(&client, &server.url("/api/tasks/next?annotator=ana"));
    assert_eq!(body["done"], true);
    assert!(body["task"].is_null());
}

#[test]
fn serves_the_bundled_page_and_static_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new();
    {
        let server = Server::start(&dir.path().join("votes.jsonl"), None, None);
        let r = client.get(server.url("/")).send().unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        assert!(r.headers()["content-type"].to_str().unwrap().starts_with("text/html"));
        assert!(r.text().unwrap().contains("/api/tasks/next"));
        assert_eq!(client.get(server.url("/missing.js")).send().unwrap().status(), StatusCode::NOT_FOUND);
    }
    let assets = dir.path().join("dist");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("app.js"), "console.log(1)").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "hidden").unwrap();
    let server = Server::start(&dir.path().join("votes.jsonl"), None, Some(assets));
    let r = client.get(server.url("/app.js")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "text/javascript");
    assert_eq!(client.get(server.url("/%2e%2e/secret.txt")).send().unwrap().status(), StatusCode::NOT_FOUND);
    // No index.html in the override directory: fall back to the bundled page.
    assert_eq!(client.get(server.url("/")).send().unwrap().status(), StatusCode::OK);
}

#[test]
fn a_log_naming_an_unknown_task_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    std::fs::write(
        &log,
        "{\"task_id\": \"ghost\", \"annotator_id\": \"ana\", \"verdict\": \"unsure\", \"timestamp\": 1}\n",
    )
    .unwrap();
    assert!(Session::open(&tasks_fixture(), &log).is_err());
}

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use fedforge::api::router;
use fedforge_core::codegen::GrammarChecker;
use fedforge_core::orchestrator::{Orchestrator, RunStore};
use futures::StreamExt;
use jsonschema::{Draft, JSONSchema};
use serde_json::{json, Value};

fn q5_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/assets/transcripts/q5")
}

fn schema(def: &str) -> JSONSchema {
    let text = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schema/api.schema.json")).unwrap();
    let full: Value = serde_json::from_str(&text).unwrap();
    let wrapper = json!({"$ref": format!("#/$defs/{def}"), "$defs": full["$defs"]});
    JSONSchema::options().with_draft(Draft::Draft202012).compile(&wrapper).unwrap()
}

fn assert_valid(def: &str, v: &Value) {
    let s = schema(def);
    let msgs: Vec<String> = match s.validate(v) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{def} invalid: {msgs:?}\n{v}");
}

struct Server {
    base: String,
    home: tempfile::TempDir,
    client: reqwest::Client,
}

async fn serve() -> Server {
    let home = tempfile::tempdir().unwrap();
    let orch = Orchestrator::new(RunStore::new(home.path())).with_checker(Arc::new(GrammarChecker));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(orch))).await.unwrap() });
    Server { base: format!("http://{addr}"), home, client: reqwest::Client::new() }
}

/// Read server-sent events until `stop` matches one or the stream ends.
async fn read_sse(resp: reqwest::Response, stop: impl Fn(&Value) -> bool) -> Vec<Value> {
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut body = resp.bytes_stream();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(60);
    loop {
        let chunk = match tokio::time::timeout_at(deadline, body.next()).await {
            Ok(Some(c)) => c.unwrap(),
            Ok(None) => return out,
            Err(_) => panic!("sse timed out after {} events", out.len()),
        };
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let mut id = None;
            let mut kind = None;
            let mut data = None;
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("event:") {
                    kind = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data = Some(v.trim().to_string());
                }
            }
            let Some(data) = data else { continue };
            let ev: Value = serde_json::from_str(&data).unwrap();
            assert_eq!(id.unwrap(), ev["seq"].to_string());
            assert_eq!(kind.as_deref(), ev["kind"].as_str());
            let done = stop(&ev);
            out.push(ev);
            if done {
                return out;
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_run_over_http_matches_golden() {
    let s = serve().await;
    let resp = s
        .client
        .post(format!("{}/runs", s.base))
        .json(&json!({"query_id": "Q5", "scripted": q5_dir()}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let created: Value = resp.json().await.unwrap();
    assert_valid("CreateRunResponse", &created);
    let id = created["run_id"].as_str().unwrap().to_string();

    let resp = s.client.get(format!("{}/runs/{id}/events?from=1", s.base)).send().await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let first = read_sse(resp, |e| e["kind"] == "plan.awaiting_user").await;
    assert_eq!(first.len(), 5);

    let run: Value = s.client.get(format!("{}/runs/{id}", s.base)).send().await.unwrap().json().await.unwrap();
    assert_valid("RunSnapshot", &run);
    assert_eq!(run["pending_decision"], "plan_review");

    let decision = json!({"decision": "approve"});
    assert_valid("DecisionRequest", &decision);
    let resp = s.client.post(format!("{}/runs/{id}/decision", s.base)).json(&decision).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    assert_valid("DecisionResponse", &body);

    let resp = s.client.get(format!("{}/runs/{id}/events?from=6", s.base)).send().await.unwrap();
    let rest = read_sse(resp, |_| false).await;
    assert_eq!(rest.last().unwrap()["kind"], "run.certified");
    let all: Vec<Value> = first.into_iter().chain(rest).collect();
    for (n, e) in all.iter().enumerate() {
        assert_eq!(e["seq"], n as u64 + 1);
        assert_valid("RunEvent", e);
    }

    let golden = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/q5.events.jsonl")).unwrap();
    let on_disk = std::fs::read_to_string(s.home.path().join("runs").join(&id).join("events.jsonl")).unwrap();
    assert_eq!(on_disk, golden);

    let resp = s.client.get(format!("{}/runs/{id}/iterations/1/files/strategy.py", s.base)).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert!(resp.text().await.unwrap().contains("class FedAvgStrategy"));
    let resp = s.client.get(format!("{}/runs/{id}/iterations/0/files/diagnosis.json", s.base)).send().await.unwrap();
    let diag: Value = resp.json().await.unwrap();
    assert_eq!(diag["report"]["layer"], "L2");
}

#[tokio::test(flavor = "multi_thread")]
async fn reconnect_with_last_event_id_resumes_after_it() {
    let s = serve().await;
    let created: Value = s
        .client
        .post(format!("{}/runs", s.base))
        .json(&json!({"query_id": "Q5", "scripted": q5_dir()}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let id = created["run_id"].as_str().unwrap();
    let resp = s
        .client
        .get(format!("{}/runs/{id}/events", s.base))
        .header("Last-Event-ID", "3")
        .send()
        .await
        .unwrap();
    let events = read_sse(resp, |e| e["kind"] == "plan.awaiting_user").await;
    assert_eq!(events[0]["seq"], 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_have_codes() {
    let s = serve().await;
    let err = |def: &str, v: &Value| assert_valid(def, v);

    let resp = s.client.post(format!("{}/runs", s.base)).json(&json!({"query_id": "Q99"})).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    err("Error", &body);
    assert_eq!(body["error"], "unknown-query");

    let resp = s.client.get(format!("{}/runs/01JGFJJZ00BEGZ6H9ZRRJQK4C8", s.base)).send().await.unwrap();
    assert_eq!(resp.status(), 404);
    let resp = s.client.get(format!("{}/runs/not-a-run", s.base)).send().await.unwrap();
    assert_eq!(resp.status(), 404);

    let created: Value = s
        .client
        .post(format!("{}/runs", s.base))
        .json(&json!({"query_id": "Q5", "scripted": q5_dir()}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let id = created["run_id"].as_str().unwrap();
    let resp = s
        .client
        .post(format!("{}/runs/{id}/decision", s.base))
        .json(&json!({"decision": "replan"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 409);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "invalid-decision");

    let resp = s.client.get(format!("{}/runs/{id}/iterations/0/files/run.json", s.base)).send().await.unwrap();
    assert_eq!(resp.status(), 404);

    let list: Value = s.client.get(format!("{}/runs", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(list["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn golden_log_matches_schema() {
    let text = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/q5.events.jsonl")).unwrap();
    for line in text.lines() {
        assert_valid("RunEvent", &serde_json::from_str(line).unwrap());
    }
    assert_valid("CreateRun", &json!({"query_id": "Q16", "t_max": 10}));
}

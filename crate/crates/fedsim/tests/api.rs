use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fedsim::api::{router, RunManager};
use fedsim_core::engine::{execute, NoObserver, RunConfig, RunHandle};
use fedsim_core::problems::ProblemSpec;
use fedsim_core::store::Store;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<(String, String)>, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_str().unwrap().to_string()))
        .collect();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn json_of(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, _, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn config(rounds: usize) -> RunConfig {
    RunConfig {
        rounds,
        problem: ProblemSpec {
            d: 5,
            clients: 4,
            samples: 10,
            ..Default::default()
        },
        group: Some("api".into()),
        ..Default::default()
    }
}

fn setup(max_runs: usize) -> (tempfile::TempDir, RunManager, Router) {
    let dir = tempfile::tempdir().unwrap();
    let manager = RunManager::new(Store::open(dir.path()).unwrap(), max_runs);
    let app = router(manager.clone());
    (dir, manager, app)
}

async fn wait_status(app: &Router, id: &str, want: &str) -> Value {
    let start = Instant::now();
    loop {
        let (_, rec) = json_of(app, "GET", &format!("/experiments/{id}"), None).await;
        if rec["status"] == want || start.elapsed() > Duration::from_secs(60) {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test]
async fn lifecycle_matches_in_memory_trace() {
    let (_dir, manager, app) = setup(2);
    let cfg = config(30);
    let (s, body) = json_of(&app, "POST", "/experiments", Some(serde_json::to_value(&cfg).unwrap())).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = body["id"].as_str().unwrap().to_string();
    let rec = wait_status(&app, &id, "finished").await;
    assert_eq!(rec["rows"].as_array().unwrap().len(), 30);

    let (_, partial) = json_of(&app, "GET", &format!("/experiments/{id}?since_round=25"), None).await;
    let rounds: Vec<u64> = partial["rows"].as_array().unwrap().iter().map(|r| r["round"].as_u64().unwrap()).collect();
    assert_eq!(rounds, vec![26, 27, 28, 29, 30]);

    let (_, listed) = json_of(&app, "GET", "/experiments?group=api&status=finished", None).await;
    assert_eq!(listed.as_array().unwrap().len(), 1);
    let (_, none) = json_of(&app, "GET", "/experiments?algorithm=diana", None).await;
    assert!(none.as_array().unwrap().is_empty());

    let (s, headers, csv) = call(&app, "GET", &format!("/experiments/{id}/export?x=rounds&y=f"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(headers.iter().any(|(k, v)| k == "x-dropped-points" && v == "0"));
    let reference = execute(&cfg, &RunHandle::new("ref"), &mut NoObserver);
    let csv = String::from_utf8(csv).unwrap();
    for (line, row) in csv.lines().skip(1).zip(&reference.rows) {
        let (x, y) = line.split_once(',').unwrap();
        assert_eq!(x.parse::<usize>().unwrap(), row.round);
        assert_eq!(y.parse::<f64>().unwrap(), row.f_global);
    }

    let (_, cli) = json_of(&app, "GET", &format!("/experiments/{id}/cli"), None).await;
    let line = cli["cli"].as_str().unwrap();
    assert!(line.starts_with("fedsim ") && line.contains("--rounds 30"), "{line}");

    let (s, body) = json_of(&app, "POST", &format!("/experiments/{id}/stop"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["status"], "finished");
    assert!(manager.wait_idle(Duration::from_secs(10)));
}

#[tokio::test]
async fn invalid_requests() {
    let (_dir, _m, app) = setup(1);
    let mut bad = serde_json::to_value(config(5)).unwrap();
    bad["clients_per_round"] = json!(9);
    let (s, body) = json_of(&app, "POST", "/experiments", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("clients per round"));
    let (s, _) = json_of(&app, "POST", "/experiments", Some(json!({"rounds": "many"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json_of(&app, "GET", "/experiments/unknown", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_of(&app, "POST", "/experiments/unknown/stop", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_of(&app, "GET", "/experiments?status=sleeping", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json_of(&app, "GET", "/export?ids=", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn stop_running_and_queued_runs() {
    let (_dir, manager, app) = setup(1);
    let long = serde_json::to_value(config(1_000_000)).unwrap();
    let (_, a) = json_of(&app, "POST", "/experiments", Some(long.clone())).await;
    let (_, b) = json_of(&app, "POST", "/experiments", Some(long)).await;
    let (a, b) = (a["id"].as_str().unwrap().to_string(), b["id"].as_str().unwrap().to_string());

    let (_, sys) = json_of(&app, "GET", "/system", None).await;
    assert_eq!((sys["running"].as_u64(), sys["queued"].as_u64(), sys["max_runs"].as_u64()), (Some(1), Some(1), Some(1)));

    let (s, body) = json_of(&app, "POST", &format!("/experiments/{b}/stop"), None).await;
    assert_eq!((s, body["status"].as_str()), (StatusCode::OK, Some("stopped")));
    wait_status(&app, &a, "running").await;
    let (s, _) = json_of(&app, "POST", &format!("/experiments/{a}/stop"), None).await;
    assert_eq!(s, StatusCode::OK);
    let rec = wait_status(&app, &a, "stopped").await;
    assert_eq!(rec["status"], "stopped");
    assert!(manager.wait_idle(Duration::from_secs(10)));
    let (s, body) = json_of(&app, "POST", &format!("/experiments/{a}/stop"), None).await;
    assert_eq!((s, body["status"].as_str()), (StatusCode::CONFLICT, Some("stopped")));
    let (_, queued) = json_of(&app, "GET", &format!("/experiments/{b}"), None).await;
    assert!(queued["rows"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn multi_export_outer_joins() {
    let (_dir, manager, app) = setup(2);
    let mut ids = Vec::new();
    for (rounds, every) in [(6, 1), (6, 2)] {
        let mut c = config(rounds);
        c.eval_every = every;
        let (_, body) = json_of(&app, "POST", "/experiments", Some(serde_json::to_value(&c).unwrap())).await;
        ids.push(body["id"].as_str().unwrap().to_string());
    }
    assert!(manager.wait_idle(Duration::from_secs(30)));
    let (s, _, csv) = call(&app, "GET", &format!("/export?ids={},{}&y=grad_norm", ids[0], ids[1]), None).await;
    assert_eq!(s, StatusCode::OK);
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("rounds,{},{}", ids[0], ids[1]));
    assert_eq!(lines.len(), 7);
    assert!(lines[1].ends_with(','), "{}", lines[1]);
}

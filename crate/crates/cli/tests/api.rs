use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use byztwin_cli::api::router;
use byztwin_cli::runs::RunManager;
use byztwin_core::consensus::Command;
use byztwin_core::store::AuditEvent;
use byztwin_core::{ExternalEvent, RunReport, Scenario, World, WorldOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn scenario(name: &str) -> String {
    let path = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).expect("scenario file")
}

fn app() -> Router {
    router(Arc::new(RunManager::new(None)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn start(app: &Router, name: &str, extra: Value) -> String {
    let mut body = json!({ "scenario": scenario(name), "paused": true });
    body.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let (s, v) = call(app, "POST", "/runs", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_for(app: &Router, id: &str, state: &str) -> Value {
    let t0 = Instant::now();
    loop {
        let (_, v) = call(app, "GET", &format!("/runs/{id}"), None).await;
        if v["state"] == state {
            return v;
        }
        assert!(t0.elapsed() < Duration::from_secs(120), "run {id} stuck in {v}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn advance(app: &Router, id: &str, until: &str) -> Value {
    let (s, _) = call(app, "POST", &format!("/runs/{id}/resume?until={until}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let t0 = Instant::now();
    loop {
        let v = wait_for(app, id, "paused").await;
        if v["now"].as_u64() == Some(byztwin_core::sim::dur::parse(until).unwrap().0) {
            return v;
        }
        assert!(t0.elapsed() < Duration::from_secs(120));
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn finish(app: &Router, id: &str) -> Value {
    call(app, "POST", &format!("/runs/{id}/resume"), None).await;
    wait_for(app, id, "finished").await
}

#[tokio::test]
async fn health_and_validate() {
    let app = app();
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, v), (StatusCode::OK, json!({ "ok": true })));

    let req = |body: String| {
        Request::post("/scenarios/validate")
            .header("content-type", "text/plain")
            .body(Body::from(body))
            .unwrap()
    };
    let resp = app.clone().oneshot(req(scenario("basic"))).await.unwrap();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["valid"], true);

    let bad = scenario("basic").replace("f = 1", "f = 0");
    let resp = app.clone().oneshot(req(bad)).await.unwrap();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["valid"], false);
    assert!(!v["errors"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn unknown_run_and_topic() {
    let app = app();
    let (s, _) = call(&app, "GET", "/runs/run-9", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = start(&app, "basic", json!({})).await;
    let (s, _) = call(&app, "GET", &format!("/runs/{id}/topics/ot.nothing/records"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "DELETE", &format!("/runs/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn injected_delay_is_traced_and_replays() {
    let app = app();
    let id = start(&app, "basic", json!({ "slice": "7ms" })).await;
    advance(&app, &id, "1200ms").await;

    let spec = json!({
        "id": 40, "kind": "delay", "delay": "2ms",
        "match": { "kinds": ["pre_prepare"] },
        "window": { "start": "0", "end": "300ms" }
    });
    let (s, v) = call(&app, "POST", &format!("/runs/{id}/faults"), Some(spec)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["event"]["at"], "1s 200ms");
    assert_eq!(v["window"], json!({ "start": "1s 200ms", "end": "1s 500ms" }));

    // Out-of-range replica is refused before it reaches the log.
    let bad = json!({ "id": 41, "kind": "crash", "bound_replicas": [9], "window": { "start": "0" } });
    let (s, _) = call(&app, "POST", &format!("/runs/{id}/faults"), Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let status = finish(&app, &id).await;
    let (_, report) = call(&app, "GET", &format!("/runs/{id}/report"), None).await;
    let report: RunReport = serde_json::from_value(report).unwrap();
    let ours: Vec<_> = report.injection_trace.iter().filter(|t| t.spec == 40).collect();
    assert!(!ours.is_empty());
    let lo = byztwin_core::SimTime::from_millis(1200);
    let hi = byztwin_core::SimTime::from_millis(1500);
    assert!(ours.iter().all(|t| t.at >= lo && t.at < hi), "{ours:?}");
    assert_eq!(status["report_hash"], report.hash());

    // The external log alone reproduces the interactive run.
    let (_, ext) = call(&app, "GET", &format!("/runs/{id}/externals"), None).await;
    let ext: Vec<ExternalEvent> = serde_json::from_value(ext).unwrap();
    assert_eq!(ext.len(), 2);
    let s = Scenario::from_toml(&scenario("basic")).unwrap();
    let opts = WorldOptions {
        externals: Some(ext),
        ..Default::default()
    };
    let replayed = World::new(s, opts).unwrap().run().unwrap();
    assert_eq!(replayed.hash(), report.hash());

    let (s, _) = call(&app, "POST", &format!("/runs/{id}/faults"), Some(json!({
        "id": 42, "kind": "crash", "bound_replicas": [1], "window": { "start": "0" }
    })))
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn confirmation_is_single_shot() {
    let app = app();
    let id = start(&app, "state_lie", json!({})).await;
    advance(&app, &id, "2s").await;

    let (_, v) = call(&app, "GET", &format!("/runs/{id}/advisories"), None).await;
    let aid = v["advisories"][0]["id"].as_u64().expect("an advisory");
    assert_eq!(v["decisions"][0]["verdict"], "defer");
    assert!(v["decisions"][0]["confirmation"].is_null());

    let url = format!("/runs/{id}/advisories/{aid}/confirm");
    let (s, v) = call(&app, "POST", &url, Some(json!({ "approve": true, "rationale": "forged digests" }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["principal"], "console");
    let (s, _) = call(&app, "POST", &url, Some(json!({ "approve": true }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &format!("/runs/{id}/advisories/999/confirm"), Some(json!({ "approve": true }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    finish(&app, &id).await;
    let (_, v) = call(&app, "GET", &format!("/runs/{id}/topics/ot.audit/records?limit=1000"), None).await;
    let mut confirmed = 0;
    let mut replaced = false;
    let head = v["head"].as_u64().unwrap();
    let mut from = 0;
    while from < head {
        let (_, page) = call(&app, "GET", &format!("/runs/{id}/topics/ot.audit/records?from={from}"), None).await;
        for r in page["records"].as_array().unwrap() {
            let ev: AuditEvent = serde_json::from_value(r["body"]["data"].clone()).unwrap();
            match ev {
                AuditEvent::AdvisoryConfirmed { advisory, approve, .. } => {
                    assert_eq!((advisory, approve), (aid, true));
                    confirmed += 1;
                }
                AuditEvent::ManagerConfirmed {
                    command: Command::Join { .. },
                    ..
                } => replaced = true,
                _ => {}
            }
            from = r["offset"].as_u64().unwrap() + 1;
        }
    }
    assert_eq!(confirmed, 1);
    assert!(replaced);
}

fn sse_ids(text: &str) -> Vec<u64> {
    text.lines()
        .filter_map(|l| l.strip_prefix("id:"))
        .map(|v| v.trim().parse().unwrap())
        .collect()
}

#[tokio::test]
async fn stream_delivers_in_offset_order_and_resumes() {
    let app = app();
    let id = start(&app, "basic", json!({ "paused": false, "pace": 20.0 })).await;
    let req = Request::get(format!("/runs/{id}/topics/ot.audit/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    let ids = sse_ids(&text);
    let (_, st) = call(&app, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!(st["state"], "finished");
    let (_, page) = call(&app, "GET", &format!("/runs/{id}/topics/ot.audit/records?limit=1"), None).await;
    let head = page["head"].as_u64().unwrap();
    assert_eq!(ids, (0..head).collect::<Vec<_>>());

    let req = Request::get(format!("/runs/{id}/topics/ot.audit/stream"))
        .header("last-event-id", "10")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    assert_eq!(sse_ids(&text), (11..head).collect::<Vec<_>>());
}

#[tokio::test]
async fn what_if_and_sweep_from_a_live_run() {
    let app = app();
    let id = start(&app, "basic", json!({})).await;
    advance(&app, &id, "1500ms").await;

    let body = json!({ "delta": { "timeout": "40ms" }, "horizon": "200ms" });
    let (s, v) = call(&app, "POST", &format!("/runs/{id}/what-if"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["at"], 1_500_000);
    assert_eq!(v["effective_timeout"], 40_000);
    assert_eq!(v["outcome"], "safe_live");
    let (_, again) = call(&app, "POST", &format!("/runs/{id}/what-if"), Some(body)).await;
    assert_eq!(again["report_hash"], v["report_hash"]);

    let sweep = json!({
        "axes": [{ "param": "leader_delay", "values": ["1ms", "30ms"] }],
        "faults": [{ "id": 50, "kind": "delay", "delay": "1ms", "match": { "kinds": ["pre_prepare"] },
                     "window": { "start": "0" } }],
        "horizon": "300ms"
    });
    let (s, map) = call(&app, "POST", &format!("/runs/{id}/sweep"), Some(sweep)).await;
    assert_eq!(s, StatusCode::OK, "{map}");
    assert_eq!(map["cells"].as_array().unwrap().len(), 2);
    assert_eq!(map["cells"][0]["outcome"], "safe_live");
    assert_ne!(map["cells"][1]["outcome"], "safe_live");
    assert_eq!(map["frontier"], json!([[0, 1]]));

    let over = json!({ "axes": [{ "param": "timeout", "values": ["10ms", "20ms"] }], "horizon": "100ms", "budget": 1 });
    let (s, _) = call(&app, "POST", &format!("/runs/{id}/sweep"), Some(over)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // Live and finished runs both branch; the latter from its final instant.
    finish(&app, &id).await;
    let (s, v) = call(&app, "POST", &format!("/runs/{id}/what-if"), Some(json!({ "horizon": "100ms" }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["at"], 3_000_000);
}

#[tokio::test]
async fn siem_export_matches_topic() {
    let app = app();
    let id = start(&app, "false_suspicion", json!({})).await;
    finish(&app, &id).await;
    let (_, page) = call(&app, "GET", &format!("/runs/{id}/topics/siem.events/records"), None).await;
    let head = page["head"].as_u64().unwrap();
    assert!(head > 0);
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/runs/{id}/siem")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len() as u64, head);
    assert!(lines.iter().all(|l| l["category"] == "false_suspicion"));
    let (_, report) = call(&app, "GET", &format!("/runs/{id}/report"), None).await;
    assert_eq!(report["outcome"], "false_suspicion_storm");
}

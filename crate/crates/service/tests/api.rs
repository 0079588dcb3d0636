mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use axum::http::{Method, StatusCode};
use serde_json::{json, Value};

use common::*;
use crowdlab::api::{ROUTES, SHARE_HEADER, VERSION_HEADER, HOOK_HEADER};
use crowdlab_core::platform::hook_token;
use crowdlab_core::simulation::workloads;

async fn create(app: &TestApp, def: &crowdlab_core::WorkflowDef) -> String {
    let r = post(app, "/workflows", workflow_json(def)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    r.body["id"].as_str().unwrap().to_string()
}

/// A workflow and a live run on the offline file adapter.
async fn file_run(app: &TestApp) -> (String, String) {
    let wf = create(app, &workloads::between_subjects_workflow()).await;
    let r = post(
        app,
        &format!("/workflows/{wf}/runs"),
        json!({ "adapter": "file", "units": workloads::study_units(), "seed": 1, "runId": "live" }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    assert_eq!(r.body["status"], "running");
    (wf, "live".to_string())
}

fn fill(path: &str, id: &str, token: &str) -> String {
    path.replace("{id}", id).replace("{token}", token)
}

#[tokio::test]
async fn valid_workflow_is_created_with_an_id() {
    let app = app();
    let r = post(&app, "/workflows", workflow_json(&workloads::condition_study(3))).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert!(r.body["id"].as_str().is_some_and(|id| !id.is_empty()));
    assert_eq!(r.body["version"], 1);
    let id = r.body["id"].as_str().unwrap();
    let got = get(&app, &format!("/workflows/{id}")).await;
    assert_eq!(got.status, StatusCode::OK);
    assert_eq!(got.body["name"], "highlighting-study");
    assert_eq!(get(&app, "/workflows").await.body.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn invalid_workflow_is_rejected_with_violations() {
    let app = app();
    let crash = workloads::crash_workflow();
    let (first, last) = (&crash.blocks[0].id, &crash.blocks.last().unwrap().id);
    let mut def = workflow_json(&crash);
    def["edges"].as_array_mut().unwrap().push(json!({ "from": last, "to": first }));
    let r = post(&app, "/workflows", def).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.code(), "invalid-workflow");
    let details = r.body["error"]["details"].as_array().unwrap();
    assert!(details.iter().any(|v| v["code"] == "cycle"), "{details:?}");
}

#[tokio::test]
async fn input_is_strict() {
    let app = app();
    let mut def = workflow_json(&workloads::condition_study(3));
    def["colour"] = json!("blue");
    let r = post(&app, "/workflows", def).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.code(), "invalid-body");

    let r = call(&app, Method::POST, "/workflows", None, &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let (_, run) = file_run(&app).await;
    let r = call(
        &app,
        Method::PUT,
        &format!("/runs/{run}/quotas"),
        Some(json!({ "maxShare": 0.5, "extra": 1 })),
        &[],
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.code(), "invalid-body");
}

#[tokio::test]
async fn every_response_carries_the_api_version() {
    let app = app();
    for uri in ["/health", "/workflows", "/runs/nope", "/no/such/route"] {
        let r = get(&app, uri).await;
        assert_eq!(r.headers.get(VERSION_HEADER).unwrap(), "1", "{uri}");
    }
    assert_eq!(get(&app, "/runs/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/runs/nope").await.code(), "not-found");
}

#[tokio::test]
async fn put_creates_a_new_version_and_detects_conflicts() {
    let app = app();
    let id = create(&app, &workloads::condition_study(3)).await;
    let mut def = get(&app, &format!("/workflows/{id}")).await.body;
    def["name"] = json!("renamed");
    let r = call(&app, Method::PUT, &format!("/workflows/{id}"), Some(def.clone()), &[]).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    assert_eq!(r.body["version"], 2);
    // Saving an edit of the stale version 1 again conflicts.
    let r = call(&app, Method::PUT, &format!("/workflows/{id}"), Some(def), &[]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.code(), "version-conflict");
    assert_eq!(get(&app, &format!("/workflows/{id}?version=1")).await.body["name"], "highlighting-study");
    assert_eq!(get(&app, &format!("/workflows/{id}")).await.body["name"], "renamed");
}

#[tokio::test]
async fn validate_endpoint_checks_units_when_given() {
    let app = app();
    let id = create(&app, &workloads::condition_study(3)).await;
    let r = post(&app, &format!("/workflows/{id}/validate"), json!({})).await;
    assert_eq!(r.body["valid"], true);
    let r = post(
        &app,
        &format!("/workflows/{id}/validate"),
        json!({ "units": [{ "id": "u1", "payload": { "headline": "x" } }] }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["valid"], false);
    assert!(!r.body["violations"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn units_ref_is_confined_to_the_data_dir() {
    let app = app();
    let id = create(&app, &workloads::between_subjects_workflow()).await;
    let units = serde_json::to_string(&workloads::study_units()).unwrap();
    std::fs::write(app.dir.path().join("units.json"), units).unwrap();
    for bad in ["/etc/passwd", "../units.json"] {
        let r = post(&app, &format!("/workflows/{id}/runs"), json!({ "adapter": "file", "unitsRef": bad })).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let r = post(&app, &format!("/workflows/{id}/runs"), json!({ "adapter": "file", "unitsRef": "units.json" })).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
}

#[tokio::test]
async fn run_status_reports_per_block_progress() {
    let app = app();
    let (_, run) = file_run(&app).await;
    let r = get(&app, &format!("/runs/{run}")).await;
    assert_eq!(r.status, StatusCode::OK);
    let blocks = r.body["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), workloads::between_subjects_workflow().blocks.len());
    assert_eq!(blocks[0]["blockId"], "sample");
    assert_eq!(blocks[0]["status"], "done");
    let collecting = blocks.iter().filter(|b| b["status"] == "collecting").count();
    assert_eq!(collecting, 3);
    assert!(blocks.iter().all(|b| b["collected"] == 0 || b["kind"] == "lambda"));
}

#[tokio::test]
async fn pause_resume_cancel() {
    let app = app();
    let (_, run) = file_run(&app).await;
    let r = post(&app, &format!("/runs/{run}/pause"), json!({})).await;
    assert_eq!(r.body["status"], "paused", "{}", r.text);
    let r = post(&app, &format!("/runs/{run}/resume"), json!({})).await;
    assert_eq!(r.body["status"], "running");
    let r = post(&app, &format!("/runs/{run}/advance"), json!({})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let r = post(&app, &format!("/runs/{run}/cancel"), json!({})).await;
    assert_eq!(r.body["status"], "failed");
    let r = post(&app, &format!("/runs/{run}/resume"), json!({})).await;
    assert!(r.status.is_client_error());
    let audit = get(&app, &format!("/runs/{run}/audit?limit=2")).await;
    assert_eq!(audit.body["events"].as_array().unwrap().len(), 2);
    assert_eq!(audit.body["next"], 2);
    let total = audit.body["total"].as_u64().unwrap();
    let tail = get(&app, &format!("/runs/{run}/audit?offset={}", total - 1)).await;
    assert_eq!(tail.body["events"].as_array().unwrap().len(), 1);
    assert!(tail.body.get("next").is_none());
}

#[tokio::test]
async fn simulated_run_and_report() {
    let app = app();
    let id = create(&app, &workloads::between_subjects_workflow()).await;
    let r = post(
        &app,
        &format!("/workflows/{id}/runs"),
        json!({ "adapter": "sim", "units": workloads::study_units(), "seed": 4 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    assert_eq!(r.body["runId"], "sim-4");
    assert_eq!(r.body["status"], "completed");
    assert_eq!(r.body["returningWorkerFraction"], 0.0);
    let report = get(&app, "/runs/sim-4/report").await;
    assert_eq!(report.status, StatusCode::OK);
    assert_eq!(report.body["totalJudgments"], r.body["judgments"]);
    let text = get(&app, "/runs/sim-4/report?format=text").await;
    assert!(text.text.starts_with("bias report"));
    let cleaned = get(&app, "/runs/sim-4/report?cleanup=drop-returning,drop-untrusted").await;
    assert_eq!(cleaned.status, StatusCode::OK);
    assert_eq!(get(&app, "/runs/sim-4/report?cleanup=bogus").await.status, StatusCode::BAD_REQUEST);
    let again = post(&app, &format!("/workflows/{id}/runs"), json!({ "adapter": "sim", "units": [], "seed": 4 })).await;
    assert!(again.status.is_client_error());
}

#[tokio::test]
async fn quota_edits_are_queued() {
    let app = app();
    let mut def = workloads::between_subjects_workflow();
    def.quotas = Some(workloads::top_country_quota(0.4));
    let wf = create(&app, &def).await;
    let r = post(
        &app,
        &format!("/workflows/{wf}/runs"),
        json!({ "adapter": "file", "units": workloads::study_units(), "runId": "q" }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    for bad in [0.0, -0.1, 1.5] {
        let r = call(&app, Method::PUT, "/runs/q/quotas", Some(json!({ "maxShare": bad })), &[]).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST);
    }
    let r = call(&app, Method::PUT, "/runs/q/quotas", Some(json!({ "maxShare": 0.2 })), &[]).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text);
    assert_eq!(r.body["quota"]["pendingMaxShare"], 0.2);
    let s = get(&app, "/runs/q/schedule-state").await;
    assert_eq!(s.status, StatusCode::OK, "{}", s.text);
    assert_eq!(s.body["quota"]["pendingMaxShare"], 0.2);
}

#[tokio::test]
async fn eligibility_hook_requires_the_run_token() {
    let app = app();
    let (_, run) = file_run(&app).await;
    let body = json!({ "platformWorkerId": "w1", "fingerprint": "f1", "country": "US", "blockId": "do-base" });
    let uri = format!("/runs/{run}/eligibility");
    let r = post(&app, &uri, body.clone()).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.code(), "hook-unauthorized");
    let wrong = hook_token(app.engine.hook_secret(), "other-run");
    let r = call(&app, Method::POST, &uri, Some(body), &[(HOOK_HEADER, &wrong)]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn returning_worker_is_blocked_with_a_message() {
    let app = app();
    let (_, run) = file_run(&app).await;
    let token = hook_token(app.engine.hook_secret(), &run);
    let uri = format!("/runs/{run}/eligibility");
    let visit = |block: &str| json!({ "platformWorkerId": "w1", "fingerprint": "f1", "country": "US", "blockId": block });
    let first = call(&app, Method::POST, &uri, Some(visit("do-base")), &[(HOOK_HEADER, &token)]).await;
    assert_eq!(first.status, StatusCode::OK, "{}", first.text);
    assert_eq!(first.body["action"], "proceed");
    assert_eq!(first.body["reason"], "new-assignment");
    let second = call(&app, Method::POST, &uri, Some(visit("do-hl-33")), &[(HOOK_HEADER, &token)]).await;
    assert_eq!(second.status, StatusCode::OK);
    assert_eq!(second.body["action"], "block");
    assert_eq!(second.body["reason"], "repeat-blocked");
    assert!(second.body["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_replays_get_the_same_decision() {
    let app = app();
    let (_, run) = file_run(&app).await;
    let token = hook_token(app.engine.hook_secret(), &run);
    let uri = format!("/runs/{run}/eligibility");
    for worker in 0..10 {
        let body = json!({
            "platformWorkerId": format!("w{worker}"),
            "fingerprint": format!("f{worker}"),
            "country": "US",
            "blockId": "do-base",
            "requestId": format!("req-{worker}"),
        });
        let calls = (0..32).map(|_| {
            let router = app.router.clone();
            let req = axum::http::Request::builder()
                .method(Method::POST)
                .uri(&uri)
                .header("content-type", "application/json")
                .header(HOOK_HEADER, &token)
                .body(axum::body::Body::from(body.to_string()))
                .unwrap();
            tokio::spawn(async move {
                use http_body_util::BodyExt;
                use tower::ServiceExt;
                let res = router.oneshot(req).await.unwrap();
                assert_eq!(res.status(), StatusCode::OK);
                let bytes = res.into_body().collect().await.unwrap().to_bytes();
                serde_json::from_slice::<Value>(&bytes).unwrap()
            })
        });
        let mut decisions = BTreeSet::new();
        for c in calls.collect::<Vec<_>>() {
            decisions.insert(c.await.unwrap().to_string());
        }
        assert_eq!(decisions.len(), 1, "worker {worker}: {decisions:?}");
        assert!(decisions.first().unwrap().contains("\"proceed\""));
    }
    let assignments = app.store.read(|s| s.assignments(&run).count()).unwrap();
    assert_eq!(assignments, 10);
}

#[tokio::test]
async fn eligibility_p99_latency_is_within_budget() {
    let app = app_on_disk();
    let (_, run) = file_run(&app).await;
    let token = hook_token(app.engine.hook_secret(), &run);
    let uri = format!("/runs/{run}/eligibility");
    let blocks = ["do-base", "do-hl-33", "do-hl-100"];
    let countries = ["US", "IN", "VE"];
    let mut latencies = Vec::new();
    for i in 0..600 {
        // A mix of first visits and returns.
        let worker = if i % 3 == 0 { i / 3 } else { i };
        let body = json!({
            "platformWorkerId": format!("w{worker}"),
            "fingerprint": format!("f{worker}"),
            "country": countries[i % 3],
            "blockId": blocks[i % 3],
        });
        let t = Instant::now();
        let r = call(&app, Method::POST, &uri, Some(body), &[(HOOK_HEADER, &token)]).await;
        latencies.push(t.elapsed().as_secs_f64() * 1e3);
        assert_eq!(r.status, StatusCode::OK);
    }
    latencies.sort_by(f64::total_cmp);
    let p99 = latencies[(latencies.len() * 99).div_ceil(100) - 1];
    assert!(p99 < 150.0, "p99 {p99:.2} ms");
}

#[tokio::test]
async fn share_tokens_never_authorize_mutation() {
    let app = app();
    let (wf, run) = file_run(&app).await;
    let wf_token = post(&app, &format!("/workflows/{wf}/share"), json!({})).await;
    assert_eq!(wf_token.status, StatusCode::CREATED);
    let run_token = post(&app, &format!("/runs/{run}/share"), json!({})).await;
    for (token, id) in [(&wf_token, wf.as_str()), (&run_token, run.as_str())] {
        let token = token.body["token"].as_str().unwrap();
        assert!(token.len() >= 32);
        for route in ROUTES.iter().filter(|r| r.is_mutating()) {
            let uri = fill(route.path, id, token);
            let method = Method::from_bytes(route.method.as_bytes()).unwrap();
            let r = call(&app, method, &uri, Some(json!({})), &[(SHARE_HEADER, token)]).await;
            assert_eq!(r.status, StatusCode::FORBIDDEN, "{} {}", route.method, route.path);
            assert_eq!(r.code(), "read-only");
        }
    }
    // Nothing changed.
    assert_eq!(get(&app, &format!("/runs/{run}")).await.body["run"]["status"], "running");
    assert_eq!(get(&app, &format!("/workflows/{wf}")).await.body["version"], 1);
}

#[tokio::test]
async fn share_tokens_read_only_their_scope() {
    let app = app();
    let (wf, run) = file_run(&app).await;
    let other = create(&app, &workloads::condition_study(3)).await;
    let token = post(&app, &format!("/workflows/{wf}/share"), json!({})).await.body["token"]
        .as_str()
        .unwrap()
        .to_string();
    let h = [(SHARE_HEADER, token.as_str())];
    for uri in [format!("/workflows/{wf}"), format!("/runs/{run}"), format!("/runs/{run}/audit"), format!("/share/{token}")] {
        let r = call(&app, Method::GET, &uri, None, &h).await;
        assert_eq!(r.status, StatusCode::OK, "{uri}: {}", r.text);
    }
    for uri in [format!("/workflows/{other}"), "/runs".to_string(), "/workflows".to_string()] {
        let r = call(&app, Method::GET, &uri, None, &h).await;
        assert_eq!(r.status, StatusCode::FORBIDDEN, "{uri}");
    }
    let r = call(&app, Method::GET, "/runs", None, &[(SHARE_HEADER, "not-a-token")]).await;
    assert_eq!(r.code(), "invalid-token");
    let view = get(&app, &format!("/share/{token}")).await;
    assert_eq!(view.body["workflow"]["id"], wf.as_str());
    assert_eq!(view.body["runs"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn revoked_share_is_forbidden() {
    let app = app();
    let (wf, _) = file_run(&app).await;
    let token = post(&app, &format!("/workflows/{wf}/share"), json!({})).await.body["token"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(get(&app, &format!("/share/{token}")).await.status, StatusCode::OK);
    let r = call(&app, Method::DELETE, &format!("/share/{token}"), None, &[]).await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let r = get(&app, &format!("/share/{token}")).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    assert_eq!(r.code(), "revoked-token");
    let r = call(&app, Method::GET, &format!("/workflows/{wf}"), None, &[(SHARE_HEADER, &token)]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    assert_eq!(r.code(), "revoked-token");
    assert_eq!(get(&app, "/share/unknown").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn every_listed_route_is_served() {
    let app = app();
    let (wf, run) = file_run(&app).await;
    let token = post(&app, &format!("/workflows/{wf}/share"), json!({})).await.body["token"]
        .as_str()
        .unwrap()
        .to_string();
    for route in ROUTES {
        let id = if route.path.starts_with("/runs") { &run } else { &wf };
        let method = Method::from_bytes(route.method.as_bytes()).unwrap();
        let r = call(&app, method, &fill(route.path, id, &token), Some(json!({})), &[]).await;
        // Bodies here are mostly wrong; the point is that the route exists.
        assert_ne!(r.status, StatusCode::METHOD_NOT_ALLOWED, "{} {}", route.method, route.path);
        assert!(r.code() != "not-found" || r.body["error"]["message"] != "no such route", "{} {}", route.method, route.path);
    }
}

#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use crowdlab::api::{router, AppState};
use crowdlab::ops::Services;
use crowdlab_core::engine::Engine;
use crowdlab_core::store::Store;

pub struct TestApp {
    pub router: Router,
    pub engine: Arc<Engine>,
    pub store: Arc<Store>,
    pub dir: tempfile::TempDir,
}

pub fn app() -> TestApp {
    app_over(Arc::new(Store::ephemeral()))
}

/// An app whose store is a log file in a temp directory.
pub fn app_on_disk() -> TestApp {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path().join("store.log")).unwrap());
    with_dir(store, dir)
}

pub fn app_over(store: Arc<Store>) -> TestApp {
    with_dir(store, tempfile::tempdir().unwrap())
}

fn with_dir(store: Arc<Store>, dir: tempfile::TempDir) -> TestApp {
    let services = Services::over(store.clone(), &dir.path().join("tasks"), "http://hook.test").unwrap();
    let engine = services.engine.clone();
    let router = router(AppState {
        services,
        data_dir: dir.path().to_path_buf(),
    });
    TestApp {
        router,
        engine,
        store,
        dir,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Value,
    pub text: String,
}

impl Reply {
    pub fn code(&self) -> &str {
        self.body["error"]["code"].as_str().unwrap_or("")
    }
}

pub async fn call(app: &TestApp, method: Method, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    raw(app, req).await
}

pub async fn raw(app: &TestApp, req: Request<Body>) -> Reply {
    let res = app.router.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8_lossy(&bytes).to_string();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    Reply {
        status,
        headers,
        body,
        text,
    }
}

pub async fn get(app: &TestApp, uri: &str) -> Reply {
    call(app, Method::GET, uri, None, &[]).await
}

pub async fn post(app: &TestApp, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, Some(body), &[]).await
}

pub fn workflow_json(def: &crowdlab_core::WorkflowDef) -> Value {
    serde_json::to_value(def).unwrap()
}

mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::{fake_studio, fixture_request};
use http_body_util::BodyExt;
use inpaint_compose_studio::api::{router, ApiError};
use inpaint_compose_studio::{Project, Round, RoundState, Snapshot};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json<T: serde::de::DeserializeOwned>(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    expect: StatusCode,
) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, expect, "{uri}: {}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn wait_for_review(app: &Router, uri: &str) -> Round {
    for _ in 0..400 {
        let r: Round = call_json(app, Method::GET, uri, None, StatusCode::OK).await;
        if r.state == RoundState::Review {
            return r;
        }
        assert!(!r.state.is_closed(), "round ended as {:?}", r.state);
        tokio::task::spawn_blocking(|| std::thread::sleep(Duration::from_millis(10))).await.unwrap();
    }
    panic!("round never reached REVIEW");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_round_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (studio, _) = fake_studio(dir.path());
    let app = router(Arc::new(studio));
    let req = serde_json::to_value(fixture_request(dir.path(), "p", 3, 2)).unwrap();

    let p: Project = call_json(&app, Method::POST, "/projects", Some(req.clone()), StatusCode::CREATED).await;
    assert_eq!(p.references.items.len(), 3);
    let e: ApiError = call_json(&app, Method::POST, "/projects", Some(req), StatusCode::CONFLICT).await;
    assert_eq!(e.code, "conflict");

    let list: Vec<Project> = call_json(&app, Method::GET, "/projects", None, StatusCode::OK).await;
    assert_eq!(list.len(), 1);

    let start = json!({"n_samples": 2, "seed": 4, "train": {"steps": 1}});
    let r: Round = call_json(&app, Method::POST, "/projects/p/rounds", Some(start), StatusCode::ACCEPTED).await;
    assert_eq!(r.index, 1);
    let r = wait_for_review(&app, "/projects/p/rounds/1").await;
    assert_eq!(r.candidates.len(), 4);

    let cid = &r.candidates[0].id;
    let (status, png) = call(&app, Method::GET, &format!("/candidates/{cid}/image"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");

    let verdict = json!({"verdict": "ACCEPTED"});
    let uri = format!("/candidates/{cid}/verdict");
    let r: Round = call_json(&app, Method::POST, &uri, Some(verdict.clone()), StatusCode::OK).await;
    assert_eq!(serde_json::to_value(r.candidates[0].verdict).unwrap(), json!("ACCEPTED"));
    let _: Round = call_json(&app, Method::POST, &uri, Some(verdict.clone()), StatusCode::OK).await;

    let m: Value = call_json(&app, Method::GET, "/projects/p/metrics", None, StatusCode::OK).await;
    assert_eq!(m["overall"]["n_samples"], 4);

    let p: Project = call_json(&app, Method::POST, "/projects/p/rounds/1/close", None, StatusCode::OK).await;
    assert_eq!(p.references.items.len(), 4);
    let e: ApiError = call_json(&app, Method::POST, &uri, Some(verdict), StatusCode::CONFLICT).await;
    assert_eq!(e.code, "wrong_state");

    let snap: Snapshot = call_json(&app, Method::GET, "/projects/p", None, StatusCode::OK).await;
    assert_eq!(snap.rounds[0].state, RoundState::Closed);
    assert_eq!(serde_json::to_value(snap.rounds[0].state).unwrap(), json!("CLOSED"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_carry_code_message_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let (studio, _) = fake_studio(dir.path());
    let app = router(Arc::new(studio));

    let e: ApiError = call_json(&app, Method::GET, "/projects/nope", None, StatusCode::NOT_FOUND).await;
    assert_eq!(e.code, "not_found");
    assert!(!e.message.is_empty());

    let mut req = serde_json::to_value(fixture_request(dir.path(), "q", 2, 1)).unwrap();
    req["references"][1]["bbox"] = json!([5, 5, 9, 9]);
    let e: ApiError = call_json(&app, Method::POST, "/projects", Some(req), StatusCode::BAD_REQUEST).await;
    assert_eq!((e.code.as_str(), e.field.as_deref()), ("invalid", Some("references[1].bbox")));

    let (status, bytes) = call(&app, Method::POST, "/projects", Some(json!({"id": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ApiError = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(e.code, "invalid");

    let e: ApiError = call_json(
        &app,
        Method::POST,
        "/candidates/q:1:bg0:0/verdict",
        Some(json!({"verdict": "ACCEPTED"})),
        StatusCode::NOT_FOUND,
    )
    .await;
    assert_eq!(e.code, "not_found");
    let (status, _) = call(&app, Method::GET, "/candidates/zz/image", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

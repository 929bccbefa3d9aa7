//! The review HTTP API, driven in-process against a cleaning loop left
//! open by `clean-labels --reviewer external`.

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use hipline::config::{LabelNoise, RunConfig};
use hipline::phantom::SplitCounts;
use hipline::pipeline::Stage;
use hipline_cli::commands::{self, Context};
use hipline_cli::service::{router, QueueView, ReviewService, StatusView};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    ctx: Context,
    app: Router,
    truth: BTreeMap<String, bool>,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let mut cfg = RunConfig {
        seed: 5,
        splits: SplitCounts {
            train: 200,
            val: 100,
            test: 40,
        },
        noise: Some(LabelNoise::default()),
        ..RunConfig::default()
    };
    cfg.stages.get_mut(Stage::Fracture).training.epochs = 1;
    let mut ctx = Context::new(cfg, None, Some(dir.path().join("out")));
    ctx.quiet = true;
    commands::generate(&ctx).unwrap();
    let report = commands::clean_labels(&ctx, Some("external")).unwrap();
    assert!(!report.finished);
    let (ds, _) = ctx.load_dataset().unwrap();
    let truth = ds
        .hips()
        .map(|(_, h, _)| (h.image_id.clone(), h.fracture))
        .collect();
    let app = router(ReviewService::open(ctx.clone()).unwrap());
    Fixture {
        _dir: dir,
        ctx,
        app,
        truth,
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body, ctype)
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body, _) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(
        status,
        StatusCode::OK,
        "{uri}: {}",
        String::from_utf8_lossy(&body)
    );
    serde_json::from_slice(&body).unwrap()
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, body, _) = send(app, req).await;
    let v = serde_json::from_slice(&body).unwrap_or(Value::Null);
    (status, v)
}

fn review(id: &str, decision: &str) -> Value {
    json!({ "image_id": id, "decision": decision, "schema_version": 1 })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_serve_state_and_reject_bad_writes() {
    let f = tokio::task::spawn_blocking(fixture).await.unwrap();
    let status: StatusView = get_json(&f.app, "/api/status").await;
    assert_eq!(status.schema_version, 1);
    assert_eq!(status.round, 1);
    assert!(status.pending > 0, "the first round queues discrepancies");
    let threshold = status.threshold.unwrap();

    let queue: QueueView = get_json(&f.app, "/api/queue").await;
    assert_eq!(queue.items.len(), status.pending);
    for pair in queue.items.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (da, db) = (
            (a.model_score - threshold).abs(),
            (b.model_score - threshold).abs(),
        );
        assert!(
            da > db || (da == db && a.image_id < b.image_id),
            "queue order"
        );
    }

    let first = queue.items[0].image_id.clone();
    let (code, png, ctype) = send(
        &f.app,
        Request::get(format!("/api/case/{first}/image"))
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let (code, _, _) = send(
        &f.app,
        Request::get("/api/case/nope/image")
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let (code, _) = post(
        &f.app,
        "/api/review",
        json!({ "image_id": first, "decision": "flip", "schema_version": 99 }),
    )
    .await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = post(
        &f.app,
        "/api/review",
        json!({ "image_id": first, "decision": "flip", "schema_version": 1, "extra": 1 }),
    )
    .await;
    assert!(code.is_client_error());

    let mut stale = review(&first, "confirm");
    stale["state_version"] = json!(status.state_version + 7);
    let (code, body) = post(&f.app, "/api/review", stale).await;
    assert_eq!(code, StatusCode::CONFLICT, "{body}");

    let not_queued = f
        .truth
        .keys()
        .find(|id| queue.items.iter().all(|i| &i.image_id != *id))
        .unwrap()
        .clone();
    let (code, body) = post(&f.app, "/api/review", review(&not_queued, "flip")).await;
    assert_eq!(code, StatusCode::CONFLICT, "{body}");

    let mut fresh = review(&first, "confirm");
    fresh["state_version"] = json!(status.state_version);
    let (code, body) = post(&f.app, "/api/review", fresh).await;
    assert_eq!(code, StatusCode::OK, "{body}");
    assert_eq!(body["item"]["status"], "confirmed");
    assert_eq!(
        body["pending"].as_u64().unwrap() as usize,
        status.pending - 1
    );
    let (code, _) = post(&f.app, "/api/review", review(&first, "flip")).await;
    assert_eq!(
        code,
        StatusCode::CONFLICT,
        "an adjudicated item is no longer pending"
    );

    let queue: QueueView = get_json(&f.app, "/api/queue").await;
    assert!(queue.items.iter().all(|i| i.image_id != first));
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(f.ctx.out.loop_state()).unwrap()).unwrap();
    assert_eq!(saved["version"].as_u64().unwrap(), queue.state_version);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn deciding_a_round_and_iterating_opens_the_next() {
    let f = tokio::task::spawn_blocking(fixture).await.unwrap();
    let before: StatusView = get_json(&f.app, "/api/status").await;
    let queue: QueueView = get_json(&f.app, "/api/queue").await;
    for item in &queue.items {
        let decision = if item.current_label == f.truth[&item.image_id] {
            "confirm"
        } else {
            "flip"
        };
        let (code, body) = post(&f.app, "/api/review", review(&item.image_id, decision)).await;
        assert_eq!(code, StatusCode::OK, "{body}");
    }
    // two triggers at once: one advances, the other is turned away
    let (a, b) = tokio::join!(
        post(&f.app, "/api/iterate", json!({})),
        post(&f.app, "/api/iterate", json!({}))
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(
        codes,
        [StatusCode::OK, StatusCode::CONFLICT],
        "{} / {}",
        a.1,
        b.1
    );
    let after: StatusView = get_json(&f.app, "/api/status").await;
    assert_eq!(after.round, before.round + 1);
    assert!(!after.busy);
    let next: QueueView = get_json(&f.app, "/api/queue").await;
    assert_ne!(next, queue);
    assert!(next.items.iter().all(|i| i.round == after.round));

    // the flips reached the manifest
    let (ds, _) = f.ctx.load_dataset().unwrap();
    for item in &queue.items {
        let (_, hip, _) = ds.hip(&item.image_id).unwrap();
        assert_eq!(
            hip.label.fracture, f.truth[&item.image_id],
            "{}",
            item.image_id
        );
    }

    // a reopened service resumes the same state
    let again = router(ReviewService::open(f.ctx.clone()).unwrap());
    let reopened: StatusView = get_json(&again, "/api/status").await;
    assert_eq!(reopened.round, after.round);
    assert_eq!(reopened.state_version, after.state_version);
}

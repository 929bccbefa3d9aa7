//! JSON-over-HTTP API for the human side of the cleaning loop. Reads run
//! concurrently; label writes are serialised behind one lock and a running
//! loop advance rejects every other write.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hipline::config::SCHEMA_VERSION;
use hipline::labelloop::{
    apply_labels, CnnScorer, Decision, LoopState, Phase, Population, QueueKind, ReviewItem,
};
use hipline::phantom::{Dataset, LabelSource};
use hipline::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::Context;
use crate::store::{self, DatasetMeta};

struct Session {
    state: LoopState,
    dataset: Dataset,
    meta: DatasetMeta,
}

pub struct ReviewService {
    ctx: Context,
    population: Population,
    scorer: CnnScorer,
    session: Mutex<Session>,
    busy: AtomicBool,
}

impl ReviewService {
    /// Attach to the loop state left on disk by `clean-labels`.
    pub fn open(ctx: Context) -> Result<Arc<Self>> {
        let path = ctx.out.loop_state();
        if !path.exists() {
            return Err(Error::data(format!(
                "no cleaning loop at {} (run `clean-labels --reviewer external` first)",
                path.display()
            )));
        }
        let state: LoopState = store::read_json(&path)?;
        let (dataset, meta) = ctx.load_dataset()?;
        let (population, _, scorer) = hipline::workflow::loop_inputs(&dataset, &ctx.config)?;
        if population.len() != state.population || state.labels.keys().ne(population.ids().iter()) {
            return Err(Error::data(
                "the saved loop state belongs to a different dataset",
            ));
        }
        Ok(Arc::new(ReviewService {
            ctx,
            population,
            scorer,
            session: Mutex::new(Session {
                state,
                dataset,
                meta,
            }),
            busy: AtomicBool::new(false),
        }))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn save_state(&self, s: &Session) -> Result<()> {
        store::write_json(&self.ctx.out.loop_state(), &s.state)
    }

    /// State plus the manifest labels.
    fn persist(&self, s: &mut Session) -> Result<()> {
        self.save_state(s)?;
        apply_labels(&mut s.dataset, &s.state.labels)?;
        store::write_labels(&self.ctx.data_dir, &s.dataset, &s.meta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub schema_version: u32,
    pub round: u32,
    pub phase: Phase,
    pub queue_kind: Option<QueueKind>,
    pub threshold: Option<f64>,
    pub queued: usize,
    pub pending: usize,
    pub reviewed: usize,
    pub population: usize,
    pub state_version: u64,
    pub busy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueView {
    pub schema_version: u32,
    pub round: u32,
    pub state_version: u64,
    pub items: Vec<ReviewItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub image_id: String,
    pub decision: Decision,
    pub schema_version: u32,
    /// When given, the write is refused unless it matches the current state.
    #[serde(default)]
    pub state_version: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub schema_version: u32,
    pub item: ReviewItem,
    pub state_version: u64,
    pub pending: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub schema_version: u32,
    pub error: String,
}

fn fail(status: StatusCode, msg: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            schema_version: SCHEMA_VERSION,
            error: msg.into(),
        }),
    )
        .into_response()
}

fn from_error(e: Error) -> Response {
    let status = match &e {
        Error::Conflict(_) => StatusCode::CONFLICT,
        Error::InvalidArgument(_) | Error::UnknownStrategy { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    fail(status, e.to_string())
}

fn status_of(svc: &ReviewService, s: &Session) -> StatusView {
    StatusView {
        schema_version: SCHEMA_VERSION,
        round: s.state.round,
        phase: s.state.phase,
        queue_kind: s.state.queue_kind,
        threshold: s.state.threshold,
        queued: s.state.queue.len(),
        pending: s.state.pending().count(),
        reviewed: s.state.reviewed,
        population: s.state.population,
        state_version: s.state.version,
        busy: svc.busy.load(Ordering::SeqCst),
    }
}

async fn get_status(State(svc): State<Arc<ReviewService>>) -> Json<StatusView> {
    let s = svc.lock();
    Json(status_of(&svc, &s))
}

async fn get_queue(State(svc): State<Arc<ReviewService>>) -> Json<QueueView> {
    let s = svc.lock();
    Json(QueueView {
        schema_version: SCHEMA_VERSION,
        round: s.state.round,
        state_version: s.state.version,
        items: s.state.pending().cloned().collect(),
    })
}

async fn get_image(
    State(svc): State<Arc<ReviewService>>,
    UrlPath(image_id): UrlPath<String>,
) -> Response {
    let rel = {
        let s = svc.lock();
        match s.dataset.hip(&image_id) {
            Some((_, h, _)) => h.image_path.clone(),
            None => return fail(StatusCode::NOT_FOUND, format!("no image {image_id}")),
        }
    };
    let Some(rel) = rel else {
        return fail(
            StatusCode::NOT_FOUND,
            format!("{image_id} has no stored image"),
        );
    };
    let png = store::read_image(&svc.ctx.data_dir, &rel).and_then(|img| store::encode_png(&img));
    match png {
        Ok(bytes) => Response::builder()
            .header(header::CONTENT_TYPE, "image/png")
            .body(Body::from(bytes))
            .expect("static response parts"),
        Err(e) => from_error(e),
    }
}

async fn post_review(
    State(svc): State<Arc<ReviewService>>,
    Json(req): Json<ReviewRequest>,
) -> Response {
    if req.schema_version != SCHEMA_VERSION {
        return fail(
            StatusCode::BAD_REQUEST,
            format!(
                "schema_version {} is not {SCHEMA_VERSION}",
                req.schema_version
            ),
        );
    }
    if svc.busy.load(Ordering::SeqCst) {
        return fail(StatusCode::CONFLICT, "a loop advance is running");
    }
    let mut s = svc.lock();
    if let Some(v) = req.state_version {
        if v != s.state.version {
            return fail(
                StatusCode::CONFLICT,
                format!("stale state version {v}; current is {}", s.state.version),
            );
        }
    }
    let item = match s
        .state
        .adjudicate(&req.image_id, req.decision, LabelSource::HumanReview)
    {
        Ok(i) => i,
        Err(e) => return from_error(e),
    };
    if let Err(e) = svc.save_state(&s) {
        return from_error(e);
    }
    Json(ReviewResponse {
        schema_version: SCHEMA_VERSION,
        item,
        state_version: s.state.version,
        pending: s.state.pending().count(),
    })
    .into_response()
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

/// Close the current round and open the next one. Retrains the scoring
/// model, so it runs on a blocking thread.
async fn post_iterate(State(svc): State<Arc<ReviewService>>) -> Response {
    if svc
        .busy
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return fail(StatusCode::CONFLICT, "a loop advance is already running");
    }
    let worker = svc.clone();
    let result = tokio::task::spawn_blocking(move || {
        let _guard = BusyGuard(&worker.busy);
        let mut state = worker.lock().state.clone();
        if state.phase != Phase::Reviewing {
            return Err(Error::Conflict(format!(
                "the loop is {:?}, not reviewing",
                state.phase
            )));
        }
        let mut scorer = worker.scorer.clone();
        state.advance(&worker.population, &mut scorer)?;
        let mut s = worker.lock();
        s.state = state;
        worker.persist(&mut s)?;
        Ok(status_of(&worker, &s))
    })
    .await;
    match result {
        Ok(Ok(mut status)) => {
            status.busy = false;
            Json(status).into_response()
        }
        Ok(Err(e)) => from_error(e),
        Err(e) => fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(svc: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/status", get(get_status))
        .route("/api/queue", get(get_queue))
        .route("/api/case/{image_id}/image", get(get_image))
        .route("/api/review", post(post_review))
        .route("/api/iterate", post(post_iterate))
        .with_state(svc)
}

/// Bind and serve until the process is stopped.
pub fn serve(ctx: Context, addr: SocketAddr) -> Result<()> {
    let svc = ReviewService::open(ctx)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::data(format!("cannot listen on {addr}: {e}")))?;
        println!(
            "review service listening on http://{}",
            listener.local_addr()?
        );
        axum::serve(listener, router(svc)).await?;
        Ok(())
    })
}

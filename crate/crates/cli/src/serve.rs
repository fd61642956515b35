//! HTTP transport for the scoring service.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use ralm::data::{read_jsonl_lenient, Event};
use ralm::serving::api::{self, ApiError, EventRequest, EventResponse, ScoreRequest};
use ralm::serving::{replay, Engine, ReplayOptions};

use crate::commands::build_engine;
use crate::config::RunConfig;

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| i64::try_from(d.as_millis()).unwrap_or(i64::MAX))
}

fn reply<T: serde::Serialize>(r: Result<T, ApiError>) -> Response {
    match r {
        Ok(body) => Json(body).into_response(),
        Err(e) => (
            StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(e.body),
        )
            .into_response(),
    }
}

async fn score(State(engine): State<Arc<Engine>>, Json(req): Json<ScoreRequest>) -> Response {
    reply(api::score(&engine, &req))
}

async fn event(State(engine): State<Arc<Engine>>, body: Bytes) -> Response {
    match serde_json::from_slice::<EventRequest>(&body) {
        Ok(req) => {
            let r = api::event(&engine, &req);
            let status = if r.accepted {
                StatusCode::OK
            } else {
                StatusCode::UNPROCESSABLE_ENTITY
            };
            (status, Json(r)).into_response()
        }
        Err(_) => {
            engine.note_rejected();
            (StatusCode::BAD_REQUEST, Json(EventResponse { accepted: false })).into_response()
        }
    }
}

async fn candidate(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Response {
    reply(api::candidate(&engine, &id))
}

async fn health(State(engine): State<Arc<Engine>>) -> Response {
    Json(api::health(&engine)).into_response()
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/event", post(event))
        .route("/candidates/{id}", get(candidate))
        .route("/healthz", get(health))
        .with_state(engine)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Loads artifacts, rebuilds seed state from the event log when configured,
/// runs the re-clustering worker on a background thread and serves HTTP
/// until SIGTERM or Ctrl-C.
pub fn serve(cfg: &RunConfig) -> anyhow::Result<()> {
    let engine = Arc::new(build_engine(cfg)?);
    if cfg.bootstrap_events && cfg.events_path.exists() {
        let (events, malformed) = read_jsonl_lenient::<Event>(&cfg.events_path)?;
        let opts = ReplayOptions {
            speed: 0.0,
            score_every: 0,
            top_n: cfg.top_n,
        };
        let r = replay(&engine, &events, malformed, opts)?;
        log::info!(
            "rebuilt {} candidates from {} clicks ({} malformed lines)",
            r.summary.candidates,
            r.summary.clicks,
            r.summary.malformed
        );
    }
    engine.recluster_tick(now_ms())?;

    let stop = Arc::new(AtomicBool::new(false));
    let worker = {
        let engine = engine.clone();
        let stop = stop.clone();
        let cadence = Duration::from_millis(cfg.recluster_cadence_ms.max(1));
        std::thread::spawn(move || {
            let mut last = Instant::now();
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(cadence.min(Duration::from_millis(50)));
                if last.elapsed() >= cadence {
                    last = Instant::now();
                    if let Err(e) = engine.recluster_tick(now_ms()) {
                        log::error!("re-cluster tick failed: {e}");
                    }
                }
            }
        })
    };

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
        println!("listening on {}", listener.local_addr()?);
        use std::io::Write;
        std::io::stdout().flush()?;
        axum::serve(listener, router(engine.clone()))
            .with_graceful_shutdown(shutdown_signal())
            .await?;
        anyhow::Ok(())
    });
    stop.store(true, Ordering::Relaxed);
    let _ = worker.join();
    let stats = serde_json::json!({
        "ingest": engine.ingest_stats(),
        "snapshot_version": engine.snapshot().version,
        "candidates": engine.candidate_count(),
        "seeds": engine.total_seeds(),
    });
    println!("shutdown {stats}");
    result
}

//! Transport-independent request and response bodies of the scoring service.

use serde::{Deserialize, Serialize};

use super::engine::{ClickEvent, Engine, ScoredCandidate};
use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub user_id: String,
    pub top_n: usize,
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub results: Vec<ScoredCandidate>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRequest {
    pub user_id: String,
    pub candidate_id: String,
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventResponse {
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub candidate_id: String,
    pub seed_count: usize,
    pub last_clustered_ts: Option<i64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub snapshot_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// A failed call with its HTTP-style status code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody { error: message.into() },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UserNotFound(_) | Error::NoSeeds(_) => 404,
            Error::DegenerateUser(_) | Error::Argument(_) => 422,
            _ => 500,
        };
        Self::new(status, e.to_string())
    }
}

pub fn score(engine: &Engine, req: &ScoreRequest) -> Result<ScoreResponse, ApiError> {
    let scored = engine.score_request(&req.user_id, req.candidates.as_deref(), req.top_n)?;
    Ok(ScoreResponse {
        results: scored.results,
        skipped: scored.skipped,
    })
}

/// Malformed events are answered with `accepted: false` and counted.
pub fn event(engine: &Engine, req: &EventRequest) -> EventResponse {
    let click = ClickEvent {
        user_id: req.user_id.clone(),
        candidate_id: req.candidate_id.clone(),
        ts: req.ts,
    };
    EventResponse {
        accepted: engine.ingest_click(&click).is_ok(),
    }
}

pub fn candidate(engine: &Engine, id: &str) -> Result<CandidateResponse, ApiError> {
    let info = engine
        .candidate_info(id)
        .ok_or_else(|| ApiError::new(404, format!("unknown candidate {id}")))?;
    Ok(CandidateResponse {
        candidate_id: info.candidate_id,
        seed_count: info.seed_count,
        last_clustered_ts: info.last_clustered_ts,
        k: info.k,
    })
}

pub fn health(engine: &Engine) -> HealthResponse {
    HealthResponse {
        status: "ok".into(),
        snapshot_version: engine.snapshot().version,
    }
}

//! Online side: seed monitoring, asynchronous re-clustering and scoring.

pub mod api;
mod engine;
mod replay;
mod seeds;

pub use engine::{
    CandidateEntry, CandidateInfo, CandidateRecord, ClickEvent, Engine, IngestStats, Scored, ScoredCandidate,
    ServingConfig, Snapshot, TickReport,
};
pub use replay::{replay, replay_file, GrowthPoint, LatencyStats, ReplayOptions, ReplayReport, ReplaySummary};
pub use seeds::{Insertion, SeedSet};

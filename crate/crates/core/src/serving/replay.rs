//! Deterministic event-log simulator for the serving engine.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::engine::{ClickEvent, Engine};
use crate::data::{read_jsonl_lenient, Event};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Simulated seconds per wall second; `0` replays without pacing.
    pub speed: f64,
    /// Issue one score request after every this many clicks; `0` disables.
    pub score_every: usize,
    pub top_n: usize,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            speed: 0.0,
            score_every: 100,
            top_n: 10,
        }
    }
}

/// Totals after one published snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub ts_ms: i64,
    pub version: u64,
    pub candidates: usize,
    pub total_seeds: usize,
}

/// The part of a replay that depends only on the log and configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub clicks: usize,
    pub non_clicks: usize,
    pub malformed: usize,
    pub ticks: usize,
    pub reclustered: usize,
    pub skipped: usize,
    pub final_version: u64,
    pub candidates: usize,
    pub total_seeds: usize,
    pub growth: Vec<GrowthPoint>,
    pub score_requests: usize,
    pub score_failures: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_durations(samples: &[Duration]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut us: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e6).collect();
        us.sort_by(f64::total_cmp);
        let q = |p: f64| us[((us.len() - 1) as f64 * p).round() as usize];
        Self {
            count: us.len(),
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: q(0.5),
            p95_us: q(0.95),
            p99_us: q(0.99),
            max_us: us[us.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub summary: ReplaySummary,
    pub latency: LatencyStats,
}

/// Feeds clicks to `engine` in log order and ticks the re-clustering worker
/// on the simulated clock: whenever an event crosses a cadence boundary the
/// worker runs at that boundary, and once more one cadence after the last
/// event.
pub fn replay(engine: &Engine, events: &[Event], malformed: usize, opts: ReplayOptions) -> Result<ReplayReport> {
    if opts.speed < 0.0 || !opts.speed.is_finite() {
        return Err(Error::Config("replay speed must be finite and non-negative".into()));
    }
    let cadence = i64::try_from(engine.config().recluster_cadence_ms.max(1)).unwrap_or(i64::MAX);
    let mut summary = ReplaySummary {
        malformed,
        ..ReplaySummary::default()
    };
    let mut latencies = Vec::new();
    let mut next_tick: Option<i64> = None;
    let mut clock_ms = i64::MIN;
    let mut prev_ts: Option<i64> = None;

    let tick = |now: i64, summary: &mut ReplaySummary| -> Result<()> {
        let before = engine.snapshot().version;
        let r = engine.recluster_tick(now)?;
        summary.ticks += 1;
        summary.reclustered += r.reclustered;
        summary.skipped += r.skipped;
        if r.version != before {
            summary.growth.push(GrowthPoint {
                ts_ms: now,
                version: r.version,
                candidates: engine.candidate_count(),
                total_seeds: engine.total_seeds(),
            });
        }
        Ok(())
    };

    for e in events {
        summary.events += 1;
        let t = e.ts.saturating_mul(1000);
        if opts.speed > 0.0 {
            if let Some(p) = prev_ts {
                let gap = (e.ts - p).max(0) as f64 / opts.speed;
                std::thread::sleep(Duration::from_secs_f64(gap.min(60.0)));
            }
        }
        prev_ts = Some(e.ts);
        clock_ms = clock_ms.max(t);
        let boundary = next_tick.get_or_insert(clock_ms.div_euclid(cadence) * cadence + cadence);
        if clock_ms >= *boundary {
            let now = clock_ms.div_euclid(cadence) * cadence;
            *boundary = now + cadence;
            tick(now, &mut summary)?;
        }
        if e.is_click != 1 {
            summary.non_clicks += 1;
            continue;
        }
        let click = ClickEvent {
            user_id: e.user_id.clone(),
            candidate_id: e.item_id.clone(),
            ts: e.ts,
        };
        if engine.ingest_click(&click).is_err() {
            summary.malformed += 1;
            continue;
        }
        summary.clicks += 1;
        if opts.score_every > 0 && summary.clicks.is_multiple_of(opts.score_every) {
            summary.score_requests += 1;
            let start = Instant::now();
            let r = engine.score_request(&e.user_id, None, opts.top_n);
            latencies.push(start.elapsed());
            if r.is_err() {
                summary.score_failures += 1;
            }
        }
    }
    if summary.events > 0 {
        tick(clock_ms.div_euclid(cadence) * cadence + cadence, &mut summary)?;
    }
    summary.final_version = engine.snapshot().version;
    summary.candidates = engine.candidate_count();
    summary.total_seeds = engine.total_seeds();
    Ok(ReplayReport {
        summary,
        latency: LatencyStats::from_durations(&latencies),
    })
}

/// [`replay`] over a JSON-lines event log; malformed lines are counted.
pub fn replay_file(engine: &Engine, path: &Path, opts: ReplayOptions) -> Result<ReplayReport> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let (events, malformed) = read_jsonl_lenient::<Event>(path)?;
    replay(engine, &events, malformed, opts)
}

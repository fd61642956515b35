//! Click ingestion, periodic re-clustering and snapshot scoring.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};

use super::seeds::{Insertion, SeedSet};
use crate::clustering::{seeds_to_representation, KMeansOptions};
use crate::error::{Error, Result};
use crate::lookalike::{
    combine_similarity, local_attention_projected, CombineWeights, LookalikeModel, Pooling, SeedsRepresentation,
};
use crate::numeric::DenseMatrix;
use crate::store::{EmbeddingSpace, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServingConfig {
    pub seed_cap: usize,
    pub cluster_k: usize,
    pub recluster_cadence_ms: u64,
    pub weights: CombineWeights,
    /// Candidates with fewer seeds are scored but flagged.
    pub confidence_floor: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            seed_cap: 10_000,
            cluster_k: 20,
            recluster_cadence_ms: 300_000,
            weights: CombineWeights::default(),
            confidence_floor: 5,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            seed: 0,
        }
    }
}

impl ServingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_cap == 0 {
            return Err(Error::Config("seed_cap must be at least 1".into()));
        }
        if self.cluster_k == 0 {
            return Err(Error::Config("cluster_k must be at least 1".into()));
        }
        if self.kmeans_max_iters == 0 || self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 {
            return Err(Error::Config("k-means needs max_iters >= 1 and tol >= 0".into()));
        }
        CombineWeights::new(self.weights.alpha, self.weights.beta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn kmeans(&self, candidate_id: &str) -> KMeansOptions {
        KMeansOptions {
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
            seed: self.seed ^ fnv1a(candidate_id.as_bytes()),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A click on a candidate, `ts` in unix seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub user_id: String,
    pub candidate_id: String,
    pub ts: i64,
}

/// Writer-side state of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub seeds: SeedSet,
    /// Milliseconds; `None` until first clustered.
    pub last_clustered_ts: Option<i64>,
    pub last_click_ts: i64,
    dirty: bool,
}

/// Precomputed scoring inputs of one clustered candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub rep: SeedsRepresentation,
    pub global: Vec<f64>,
    /// `centroids · W_l`, absent under average pooling.
    pub projected: Option<DenseMatrix>,
    pub seed_count: usize,
    pub last_clustered_ts: i64,
}

/// Immutable scoring state. `None` marks a candidate whose seeds have no
/// stored embedding.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub published_ts: i64,
    pub model: Arc<LookalikeModel>,
    pub weights: CombineWeights,
    pub confidence_floor: usize,
    pub candidates: BTreeMap<String, Option<Arc<CandidateEntry>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: String,
    pub score: f64,
    pub global_sim: f64,
    pub local_sim: f64,
    pub seeds_version: u64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub results: Vec<ScoredCandidate>,
    pub skipped: Vec<String>,
    pub version: u64,
}

impl Snapshot {
    fn empty(model: Arc<LookalikeModel>, config: &ServingConfig) -> Self {
        Self {
            version: 0,
            published_ts: 0,
            model,
            weights: config.weights,
            confidence_floor: config.confidence_floor,
            candidates: BTreeMap::new(),
        }
    }

    /// Scores `user` against `filter` (or every candidate), best first, ties
    /// by candidate id, truncated to `top_n`.
    pub fn score(&self, user_id: &str, user: &[f64], filter: Option<&[String]>, top_n: usize) -> Result<Scored> {
        let n = user.iter().map(|x| x * x).sum::<f64>();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateUser(user_id.to_string()));
        }
        let mut results = Vec::new();
        let mut skipped = Vec::new();
        let mut visit = |id: &str, entry: Option<&Option<Arc<CandidateEntry>>>| -> Result<()> {
            match entry {
                Some(Some(e)) => {
                    results.push(self.score_entry(id, e, user)?);
                    Ok(())
                }
                _ => {
                    skipped.push(id.to_string());
                    Ok(())
                }
            }
        };
        match filter {
            Some(ids) => {
                let mut ids: Vec<&String> = ids.iter().collect();
                ids.sort();
                ids.dedup();
                for id in ids {
                    visit(id, self.candidates.get(id))?;
                }
            }
            None => {
                for (id, e) in &self.candidates {
                    visit(id, Some(e))?;
                }
            }
        }
        results.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.candidate_id.cmp(&b.candidate_id))
        });
        results.truncate(top_n);
        Ok(Scored {
            results,
            skipped,
            version: self.version,
        })
    }

    fn score_entry(&self, id: &str, e: &CandidateEntry, user: &[f64]) -> Result<ScoredCandidate> {
        let local = match &e.projected {
            Some(p) => local_attention_projected(&e.rep.centroids, p, user)?.pooled,
            None => e.global.clone(),
        };
        let sim = combine_similarity(user, &e.global, &local, self.weights)?;
        Ok(ScoredCandidate {
            candidate_id: id.to_string(),
            score: sim.score,
            global_sim: sim.global_sim,
            local_sim: sim.local_sim,
            seeds_version: self.version,
            low_confidence: e.seed_count < self.confidence_floor,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub reclustered: usize,
    /// Candidates whose seeds had no stored embedding.
    pub skipped: usize,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub candidate_id: String,
    pub seed_count: usize,
    pub last_clustered_ts: Option<i64>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Default)]
struct WriterState {
    records: BTreeMap<String, CandidateRecord>,
    stats: IngestStats,
}

/// One writer path (ingestion and re-clustering share a lock) and lock-free
/// reads of the current snapshot apart from a pointer clone.
#[derive(Debug)]
pub struct Engine {
    config: ServingConfig,
    model: Arc<LookalikeModel>,
    store: Arc<EmbeddingStore>,
    writer: Mutex<WriterState>,
    current: RwLock<Arc<Snapshot>>,
}

impl Engine {
    pub fn new(config: ServingConfig, model: LookalikeModel, store: EmbeddingStore) -> Result<Self> {
        config.validate()?;
        if store.space() != EmbeddingSpace::Lookalike {
            return Err(Error::Config("serving needs a look-alike embedding store".into()));
        }
        if store.dim() != model.config.h {
            return Err(Error::dim(
                "Engine::new",
                (store.len(), store.dim()),
                (store.len(), model.config.h),
            ));
        }
        let model = Arc::new(model);
        Ok(Self {
            current: RwLock::new(Arc::new(Snapshot::empty(model.clone(), &config))),
            config,
            model,
            store: Arc::new(store),
            writer: Mutex::new(WriterState::default()),
        })
    }

    pub fn config(&self) -> &ServingConfig {
        &self.config
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    fn writer(&self) -> MutexGuard<'_, WriterState> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Adds the user to the candidate's seeds, creating the candidate if new.
    pub fn ingest_click(&self, event: &ClickEvent) -> Result<Insertion> {
        let mut w = self.writer();
        if event.user_id.is_empty() || event.candidate_id.is_empty() {
            w.stats.rejected += 1;
            return Err(Error::Argument("click event needs user_id and candidate_id".into()));
        }
        w.stats.accepted += 1;
        let cap = self.config.seed_cap;
        let rec = w
            .records
            .entry(event.candidate_id.clone())
            .or_insert_with(|| CandidateRecord {
                candidate_id: event.candidate_id.clone(),
                seeds: SeedSet::new(cap),
                last_clustered_ts: None,
                last_click_ts: event.ts,
                dirty: false,
            });
        rec.last_click_ts = event.ts;
        rec.dirty = true;
        Ok(rec.seeds.insert(&event.user_id))
    }

    /// Counts a malformed input that never became an event.
    pub fn note_rejected(&self) {
        self.writer().stats.rejected += 1;
    }

    pub fn ingest_stats(&self) -> IngestStats {
        self.writer().stats
    }

    /// Re-clusters every changed candidate last clustered at least one
    /// cadence before `now_ms`, then publishes a new snapshot if anything
    /// changed.
    pub fn recluster_tick(&self, now_ms: i64) -> Result<TickReport> {
        let mut w = self.writer();
        let cadence = i64::try_from(self.config.recluster_cadence_ms).unwrap_or(i64::MAX);
        let mut updates: Vec<(String, Option<Arc<CandidateEntry>>)> = Vec::new();
        let mut report = TickReport::default();
        for rec in w.records.values_mut() {
            let due = rec.dirty
                && rec
                    .last_clustered_ts
                    .is_none_or(|t| now_ms.saturating_sub(t) >= cadence);
            if !due {
                continue;
            }
            rec.dirty = false;
            rec.last_clustered_ts = Some(now_ms);
            let seeds: Vec<&str> = rec.seeds.iter().collect();
            let opts = self.config.kmeans(&rec.candidate_id);
            match seeds_to_representation(
                &rec.candidate_id,
                &seeds,
                &self.store,
                self.config.cluster_k,
                opts,
                now_ms,
            ) {
                Ok((rep, _missing)) => {
                    let entry = self.entry(rep, rec.seeds.len(), now_ms)?;
                    updates.push((rec.candidate_id.clone(), Some(Arc::new(entry))));
                    report.reclustered += 1;
                }
                Err(Error::NoSeeds(id)) => {
                    log::warn!("candidate {id}: no seed has a stored embedding");
                    updates.push((rec.candidate_id.clone(), None));
                    report.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let prev = self.snapshot();
        if updates.is_empty() {
            report.version = prev.version;
            return Ok(report);
        }
        let mut next = Snapshot {
            version: prev.version + 1,
            published_ts: now_ms,
            model: self.model.clone(),
            weights: self.config.weights,
            confidence_floor: self.config.confidence_floor,
            candidates: prev.candidates.clone(),
        };
        next.candidates.extend(updates);
        report.version = next.version;
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(next);
        drop(w);
        Ok(report)
    }

    fn entry(&self, rep: SeedsRepresentation, seed_count: usize, now_ms: i64) -> Result<CandidateEntry> {
        let global = self.model.global_vector(&rep.centroids)?;
        let projected = match self.model.config.pooling {
            Pooling::Attention => Some(rep.centroids.matmul(self.model.local_params().w_l)?),
            Pooling::Average => None,
        };
        Ok(CandidateEntry {
            rep,
            global,
            projected,
            seed_count,
            last_clustered_ts: now_ms,
        })
    }

    /// The current snapshot; holding it pins that version.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn score_request(&self, user_id: &str, filter: Option<&[String]>, top_n: usize) -> Result<Scored> {
        let user = self
            .store
            .get(user_id)
            .ok_or_else(|| Error::UserNotFound(user_id.to_string()))?;
        self.snapshot().score(user_id, user, filter, top_n)
    }

    pub fn candidate_info(&self, candidate_id: &str) -> Option<CandidateInfo> {
        let snap = self.snapshot();
        let w = self.writer();
        let rec = w.records.get(candidate_id)?;
        let k = snap
            .candidates
            .get(candidate_id)
            .and_then(|e| e.as_ref())
            .map_or(0, |e| e.rep.k());
        Some(CandidateInfo {
            candidate_id: candidate_id.to_string(),
            seed_count: rec.seeds.len(),
            last_clustered_ts: rec.last_clustered_ts,
            k,
        })
    }

    /// Current seed users of every candidate, oldest first.
    pub fn seed_sets(&self) -> BTreeMap<String, Vec<String>> {
        self.writer()
            .records
            .iter()
            .map(|(id, r)| (id.clone(), r.seeds.to_vec()))
            .collect()
    }

    pub fn candidate_count(&self) -> usize {
        self.writer().records.len()
    }

    pub fn total_seeds(&self) -> usize {
        self.writer().records.values().map(|r| r.seeds.len()).sum()
    }
}

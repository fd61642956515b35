//! Phase-2 training with per-epoch re-clustering, and offline evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{combine_similarity, local_attention_projected, CombineWeights, SeedsRepresentation};
use super::model::{LookalikeBatch, LookalikeConfig, LookalikeModel, LookalikeSample, Pooling};
use crate::clustering::{kmeans_fit, KMeansOptions};
use crate::data::{Event, UserSplit};
use crate::error::{Error, Result};
use crate::evalgen::metrics::{auc, prec_at_k, random_prec_at_k};
use crate::numeric::{AdamConfig, DenseMatrix, Tape};
use crate::store::{write_atomic, EmbeddingSpace, EmbeddingStore};

/// Candidates with their seed users and held-out clickers, as rows of the
/// universal store.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub candidates: Vec<String>,
    /// Training users who clicked each candidate, in first-click order.
    pub seeds: Vec<Vec<usize>>,
    /// Held-out (user, candidate, clicked) impressions.
    pub test_impressions: Vec<(usize, usize, bool)>,
    pub train_users: Vec<usize>,
    pub test_users: Vec<usize>,
}

impl Campaign {
    /// Every item with at least `min_seeds` clicking training users becomes a
    /// candidate. Users absent from the store are ignored.
    pub fn build(universal: &EmbeddingStore, events: &[Event], split: &UserSplit, min_seeds: usize) -> Self {
        let mut by_item: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut seen: HashSet<(usize, &str)> = HashSet::new();
        for e in events.iter().filter(|e| e.is_click == 1) {
            let Some(u) = universal.index_of(&e.user_id) else {
                continue;
            };
            if split.is_test(&e.user_id) || !seen.insert((u, e.item_id.as_str())) {
                continue;
            }
            by_item.entry(e.item_id.as_str()).or_default().push(u);
        }
        let mut candidates = Vec::new();
        let mut seeds = Vec::new();
        for (item, users) in by_item {
            if users.len() >= min_seeds.max(1) {
                candidates.push(item.to_string());
                seeds.push(users);
            }
        }
        let cand_index: HashMap<&str, usize> = candidates.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut clicked: BTreeMap<(usize, usize), bool> = BTreeMap::new();
        for e in events {
            let (Some(u), Some(&c)) = (universal.index_of(&e.user_id), cand_index.get(e.item_id.as_str())) else {
                continue;
            };
            if split.is_test(&e.user_id) {
                *clicked.entry((u, c)).or_insert(false) |= e.is_click == 1;
            }
        }
        let (mut train_users, mut test_users) = (Vec::new(), Vec::new());
        for (i, id) in universal.ids().iter().enumerate() {
            if split.is_test(id) {
                test_users.push(i);
            } else {
                train_users.push(i);
            }
        }
        Self {
            candidates,
            seeds,
            test_impressions: clicked.into_iter().map(|((u, c), y)| (u, c, y)).collect(),
            train_users,
            test_users,
        }
    }

    /// Candidates each held-out user clicked.
    pub fn test_reads(&self) -> BTreeMap<usize, HashSet<usize>> {
        let mut reads: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
        for &(u, c, y) in &self.test_impressions {
            if y {
                reads.entry(u).or_default().insert(c);
            }
        }
        reads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookalikeTrainConfig {
    pub h: usize,
    pub s_a: usize,
    pub weights: CombineWeights,
    pub pooling: Pooling,
    /// Maximum clusters per candidate.
    pub cluster_k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Negatives per seed.
    pub negatives: usize,
    pub eval_ks: Vec<usize>,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl LookalikeTrainConfig {
    pub fn new(h: usize, seed: u64) -> Self {
        Self {
            h,
            s_a: h,
            weights: CombineWeights::default(),
            pooling: Pooling::Attention,
            cluster_k: 20,
            epochs: 5,
            lr: 0.001,
            batch_size: 256,
            negatives: 10,
            eval_ks: vec![10, 50],
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            seed,
        }
    }

    fn kmeans(&self, salt: u64) -> KMeansOptions {
        KMeansOptions {
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
            seed: self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        }
    }
}

/// Row `epoch = 0` is measured before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookEpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// AUC of the serving score over held-out impressions.
    pub test_auc: f64,
    /// `(K, prec@K)` over held-out users.
    pub prec_at: Vec<(usize, f64)>,
}

impl LookEpochMetrics {
    pub fn prec(&self, k: usize) -> Option<f64> {
        self.prec_at.iter().find(|p| p.0 == k).map(|p| p.1)
    }
}

#[derive(Debug, Clone)]
pub struct LookalikeOutput {
    pub model: LookalikeModel,
    pub metrics: Vec<LookEpochMetrics>,
    /// Look-alike embeddings of every user in the universal store.
    pub store: EmbeddingStore,
    /// `(K, prec@K)` of a uniformly random ranking.
    pub random_prec_at: Vec<(usize, f64)>,
}

/// Cluster memberships (as universal rows) and centroids for every candidate.
pub struct Clustering {
    pub members: Vec<Vec<Vec<usize>>>,
    pub centroids: Vec<DenseMatrix>,
}

pub fn cluster_candidates(
    embeddings: &DenseMatrix,
    seeds: &[Vec<usize>],
    k: usize,
    opts: impl Fn(usize) -> KMeansOptions,
) -> Result<Clustering> {
    let mut members = Vec::with_capacity(seeds.len());
    let mut centroids = Vec::with_capacity(seeds.len());
    for (c, s) in seeds.iter().enumerate() {
        let fit = kmeans_fit(&embeddings.select_rows(s), k, opts(c))?;
        members.push(
            fit.members()
                .into_iter()
                .map(|g| g.into_iter().map(|i| s[i]).collect())
                .collect(),
        );
        centroids.push(fit.centroids);
    }
    Ok(Clustering { members, centroids })
}

/// Held-out metrics of a model against fixed centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub test_loss: f64,
    pub test_auc: f64,
    pub prec_at: Vec<(usize, f64)>,
    pub random_prec_at: Vec<(usize, f64)>,
}

/// Scores for one user against every candidate.
struct CandidateCache {
    global: Vec<Vec<f64>>,
    projected: Vec<DenseMatrix>,
}

impl CandidateCache {
    fn new(model: &LookalikeModel, centroids: &[DenseMatrix]) -> Result<Self> {
        let w_l = model.local_params().w_l;
        Ok(Self {
            global: centroids
                .iter()
                .map(|c| model.global_vector(c))
                .collect::<Result<_>>()?,
            projected: centroids.iter().map(|c| c.matmul(w_l)).collect::<Result<_>>()?,
        })
    }

    /// `(serving score, training logit)`, or `None` for a zero embedding.
    fn score(
        &self,
        model: &LookalikeModel,
        centroids: &DenseMatrix,
        c: usize,
        user: &[f64],
    ) -> Result<Option<(f64, f64)>> {
        if user.iter().all(|&x| x == 0.0) {
            return Ok(None);
        }
        let g = &self.global[c];
        let local = match model.config.pooling {
            Pooling::Attention => local_attention_projected(centroids, &self.projected[c], user)?.pooled,
            Pooling::Average => g.clone(),
        };
        let w = model.config.weights;
        let sim = combine_similarity(user, g, &local, w)?;
        let logit = super::attention::training_logit(user, g, &local, w, model.logit_bias());
        Ok(Some((sim.score, logit)))
    }
}

impl CandidateCache {
    /// Candidate indices by descending serving score, ties by index.
    fn rank(&self, model: &LookalikeModel, centroids: &[DenseMatrix], user: &[f64]) -> Result<Vec<usize>> {
        let floor = -(model.config.weights.alpha + model.config.weights.beta);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(centroids.len());
        for (c, cent) in centroids.iter().enumerate() {
            let s = self.score(model, cent, c, user)?.map_or(floor, |p| p.0);
            order.push((s, c));
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(order.into_iter().map(|p| p.1).collect())
    }
}

/// The `top_n` best candidates for each of `users` (rows of `embeddings`).
pub fn recommend(
    model: &LookalikeModel,
    embeddings: &DenseMatrix,
    centroids: &[DenseMatrix],
    users: &[usize],
    top_n: usize,
) -> Result<Vec<Vec<usize>>> {
    let cache = CandidateCache::new(model, centroids)?;
    users
        .iter()
        .map(|&u| {
            let mut r = cache.rank(model, centroids, embeddings.row(u))?;
            r.truncate(top_n);
            Ok(r)
        })
        .collect()
}

/// Loss and AUC over held-out impressions, prec@K over held-out users.
///
/// A zero look-alike embedding has no serving score; such users rank
/// candidates in id order and score `-(α+β)` in the AUC.
pub fn evaluate(
    model: &LookalikeModel,
    embeddings: &DenseMatrix,
    campaign: &Campaign,
    centroids: &[DenseMatrix],
    ks: &[usize],
) -> Result<Evaluation> {
    let cache = CandidateCache::new(model, centroids)?;
    let floor = -(model.config.weights.alpha + model.config.weights.beta);
    let mut scores = Vec::with_capacity(campaign.test_impressions.len());
    let mut labels = Vec::with_capacity(campaign.test_impressions.len());
    let mut loss = 0.0;
    for &(u, c, y) in &campaign.test_impressions {
        let user = embeddings.row(u);
        let (s, z) = cache
            .score(model, &centroids[c], c, user)?
            .unwrap_or((floor, model.logit_bias()));
        scores.push(s);
        labels.push(y);
        loss += crate::numeric::tape::logistic_loss(z, f64::from(u8::from(y)));
    }
    let test_loss = loss / campaign.test_impressions.len().max(1) as f64;
    let test_auc = match auc(&scores, &labels) {
        Ok(a) => a,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };

    let reads = campaign.test_reads();
    let n = campaign.candidates.len();
    let mut ranked: Vec<(Vec<usize>, HashSet<usize>)> = Vec::with_capacity(reads.len());
    for (&u, read) in &reads {
        ranked.push((cache.rank(model, centroids, embeddings.row(u))?, read.clone()));
    }
    let mut prec_at = Vec::with_capacity(ks.len());
    let mut random_prec_at = Vec::with_capacity(ks.len());
    for &k in ks {
        let p = match prec_at_k(&ranked, k) {
            Ok(p) => p,
            Err(Error::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        prec_at.push((k, p));
        let r = if ranked.is_empty() {
            f64::NAN
        } else {
            ranked.iter().map(|(_, s)| random_prec_at_k(n, s.len(), k)).sum::<f64>() / ranked.len() as f64
        };
        random_prec_at.push((k, r));
    }
    Ok(Evaluation {
        test_loss,
        test_auc,
        prec_at,
        random_prec_at,
    })
}

/// Positives and negatives grouped by candidate, chunked into batches whose
/// order is shuffled. Each batch touches few candidates.
fn epoch_batches<R: Rng + ?Sized>(
    campaign: &Campaign,
    negatives: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<LookalikeSample>> {
    let mut out = Vec::new();
    for (c, seeds) in campaign.seeds.iter().enumerate() {
        let seed_set: HashSet<usize> = seeds.iter().copied().collect();
        if seed_set.len() >= campaign.train_users.len() {
            continue;
        }
        let mut samples = Vec::with_capacity(seeds.len() * (negatives + 1));
        for &u in seeds {
            samples.push(LookalikeSample {
                candidate: c,
                user: u,
                label: 1.0,
            });
            let mut drawn = 0;
            while drawn < negatives {
                let v = campaign.train_users[rng.random_range(0..campaign.train_users.len())];
                if !seed_set.contains(&v) {
                    samples.push(LookalikeSample {
                        candidate: c,
                        user: v,
                        label: 0.0,
                    });
                    drawn += 1;
                }
            }
        }
        samples.shuffle(rng);
        out.extend(samples.chunks(batch_size).map(<[_]>::to_vec));
    }
    out.shuffle(rng);
    out
}

fn batches_loss(
    model: &LookalikeModel,
    universal: &DenseMatrix,
    clusters: &[Vec<Vec<usize>>],
    batches: &[Vec<LookalikeSample>],
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let (loss, _) = model.forward_batch(
            &mut tape,
            &LookalikeBatch {
                universal,
                clusters,
                samples: batch,
            },
        )?;
        total += tape.scalar(loss) * batch.len() as f64;
        n += batch.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Alternates re-clustering every candidate's transformed seeds with one
/// epoch of Adam on the sigmoid cross-entropy.
pub fn train_lookalike(
    universal: &EmbeddingStore,
    campaign: &Campaign,
    k_a: usize,
    config: &LookalikeTrainConfig,
) -> Result<LookalikeOutput> {
    if config.cluster_k == 0
        || config.batch_size == 0
        || config.negatives == 0
        || config.lr.is_nan()
        || config.lr <= 0.0
    {
        return Err(Error::Config(
            "cluster_k, batch size and negatives must be positive and lr > 0".into(),
        ));
    }
    if campaign.candidates.is_empty() {
        return Err(Error::NoSeeds("every candidate (no training clicks)".into()));
    }
    let lconf = LookalikeConfig {
        m: universal.dim(),
        h: config.h,
        k_a,
        s_a: config.s_a,
        weights: config.weights,
        pooling: config.pooling,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LookalikeModel::new(lconf, &mut rng)?;
    model.set_logit_bias(-(config.negatives as f64).ln());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let adam = AdamConfig::with_lr(config.lr);
    let x = universal.vectors();

    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let mut random_prec_at = Vec::new();
    let mut steps = 0;
    let mut pending_train_loss = None;
    for epoch in 0..=config.epochs {
        let embeddings = model.embed_all(x)?;
        let clustering = cluster_candidates(&embeddings, &campaign.seeds, config.cluster_k, |c| {
            config.kmeans((epoch * campaign.seeds.len() + c) as u64)
        })?;
        let batches = epoch_batches(campaign, config.negatives, config.batch_size, &mut sample_rng);
        if epoch == 0 {
            pending_train_loss = Some(batches_loss(&model, x, &clustering.members, &batches)?);
        }
        let eval = evaluate(&model, &embeddings, campaign, &clustering.centroids, &config.eval_ks)?;
        random_prec_at = eval.random_prec_at.clone();
        let train_loss = pending_train_loss.take().unwrap_or(f64::NAN);
        let row = LookEpochMetrics {
            epoch,
            batches: steps,
            train_loss,
            test_loss: eval.test_loss,
            test_auc: eval.test_auc,
            prec_at: eval.prec_at,
        };
        if epoch > 0 {
            log::info!(
                "phase 2 epoch {epoch}: train {:.4} test {:.4} auc {:.4}",
                row.train_loss,
                row.test_loss,
                row.test_auc
            );
        }
        metrics.push(row);
        if epoch == config.epochs {
            break;
        }
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let mut tape = Tape::new();
            let (loss, _) = model.forward_batch(
                &mut tape,
                &LookalikeBatch {
                    universal: x,
                    clusters: &clustering.members,
                    samples: batch,
                },
            )?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {}, step {steps}",
                    epoch + 1
                )));
            }
            let grads = tape.backward(loss)?;
            model.params.accumulate(&tape, &grads)?;
            model.params.adam_step(&adam)?;
            total += value * batch.len() as f64;
            seen += batch.len();
            steps += 1;
        }
        pending_train_loss = Some(total / seen.max(1) as f64);
    }

    let embeddings = model.embed_all(x)?;
    let store = EmbeddingStore::new(EmbeddingSpace::Lookalike, universal.ids().to_vec(), embeddings)?;
    Ok(LookalikeOutput {
        model,
        metrics,
        store,
        random_prec_at,
    })
}

/// Centroids of every candidate from stored look-alike embeddings.
pub fn seeds_representations(
    store: &EmbeddingStore,
    campaign: &Campaign,
    k: usize,
    opts: KMeansOptions,
    version_ts: i64,
) -> Result<Vec<SeedsRepresentation>> {
    let clustering = cluster_candidates(store.vectors(), &campaign.seeds, k, |_| opts)?;
    Ok(campaign
        .candidates
        .iter()
        .zip(clustering.centroids)
        .map(|(c, centroids)| SeedsRepresentation {
            candidate_id: c.clone(),
            centroids,
            version_ts,
        })
        .collect())
}

pub fn write_metrics_csv(path: &Path, metrics: &[LookEpochMetrics]) -> Result<()> {
    let ks: Vec<usize> = metrics
        .first()
        .map(|m| m.prec_at.iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let mut out = String::from("epoch,batches,train_loss,test_loss,test_auc");
    for k in &ks {
        out.push_str(&format!(",prec_at_{k}"));
    }
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}",
            m.epoch, m.batches, m.train_loss, m.test_loss, m.test_auc
        ));
        for (_, p) in &m.prec_at {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

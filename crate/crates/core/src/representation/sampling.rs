//! Positive collection and frequency-rank negative sampling.

use std::collections::{HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Event;
use crate::error::{Error, Result};

/// `p(k) = (ln(k+2) − ln(k+1)) / ln(D+1)` for ranks `k = 0..D`.
pub fn negative_sampling_distribution(d: usize) -> Result<Vec<f64>> {
    if d < 1 {
        return Err(Error::Argument("negative sampling needs at least one item".into()));
    }
    let denom = (d as f64).ln_1p();
    Ok((0..d).map(|k| (1.0 / (k as f64 + 1.0)).ln_1p() / denom).collect())
}

/// Rank of every item by descending count, ties by ascending index.
pub fn item_ranks(counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; counts.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingLimits {
    pub max_positives: usize,
    pub negatives: usize,
}

impl Default for SamplingLimits {
    fn default() -> Self {
        Self {
            max_positives: 50,
            negatives: 10,
        }
    }
}

/// Draws item indices by frequency rank.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    by_rank: Vec<usize>,
    dist: WeightedIndex<f64>,
}

const MAX_REJECTIONS: usize = 1000;

impl NegativeSampler {
    pub fn new(counts: &[u64]) -> Result<Self> {
        let ranks = item_ranks(counts);
        let mut by_rank = vec![0; counts.len()];
        for (i, &r) in ranks.iter().enumerate() {
            by_rank[r] = i;
        }
        let p = negative_sampling_distribution(counts.len())?;
        let dist = WeightedIndex::new(&p).map_err(|e| Error::Argument(e.to_string()))?;
        Ok(Self { by_rank, dist })
    }

    pub fn items(&self) -> usize {
        self.by_rank.len()
    }

    /// One item outside `exclude`, or `None` if rejection keeps failing.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, exclude: &HashSet<usize>) -> Option<usize> {
        (0..MAX_REJECTIONS)
            .map(|_| self.by_rank[self.dist.sample(rng)])
            .find(|i| !exclude.contains(i))
    }
}

/// A user's clicked items, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPositives {
    pub user: usize,
    /// Retained positives, at most `max_positives`.
    pub items: Vec<usize>,
    /// Every clicked item, used for exclusion.
    pub all: HashSet<usize>,
}

/// Deduplicates clicks per (user, item) keeping the latest time, then keeps
/// the `max_positives` most recent per user. Events whose user or item is
/// unknown are ignored. Output is ordered by user index.
pub fn collect_positives(
    events: &[Event],
    users: &HashMap<&str, usize>,
    items: &HashMap<&str, usize>,
    max_positives: usize,
) -> Vec<UserPositives> {
    let mut latest: HashMap<(usize, usize), i64> = HashMap::new();
    for e in events.iter().filter(|e| e.is_click == 1) {
        let (Some(&u), Some(&i)) = (users.get(e.user_id.as_str()), items.get(e.item_id.as_str())) else {
            continue;
        };
        latest.entry((u, i)).and_modify(|t| *t = (*t).max(e.ts)).or_insert(e.ts);
    }
    let mut per_user: HashMap<usize, Vec<(i64, usize)>> = HashMap::new();
    for ((u, i), t) in latest {
        per_user.entry(u).or_default().push((t, i));
    }
    let mut out: Vec<UserPositives> = per_user
        .into_iter()
        .map(|(user, mut clicks)| {
            clicks.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let all = clicks.iter().map(|c| c.1).collect();
            let items = clicks.iter().take(max_positives).map(|c| c.1).collect();
            UserPositives { user, items, all }
        })
        .collect();
    out.sort_by_key(|p| p.user);
    out
}

/// A user with the positive item first, followed by sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub user: usize,
    pub items: Vec<usize>,
}

/// One example per retained positive, each with `limits.negatives` fresh
/// negatives; examples are shuffled and chunked into batches.
pub fn build_training_batches<R: Rng + ?Sized>(
    positives: &[UserPositives],
    sampler: &NegativeSampler,
    limits: SamplingLimits,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TrainingExample>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut examples = build_examples(positives, sampler, limits, rng);
    examples.shuffle(rng);
    Ok(examples.chunks(batch_size).map(<[_]>::to_vec).collect())
}

pub fn build_examples<R: Rng + ?Sized>(
    positives: &[UserPositives],
    sampler: &NegativeSampler,
    limits: SamplingLimits,
    rng: &mut R,
) -> Vec<TrainingExample> {
    let mut examples = Vec::new();
    for p in positives {
        'pos: for &pos in p.items.iter().take(limits.max_positives) {
            let mut items = Vec::with_capacity(limits.negatives + 1);
            items.push(pos);
            for _ in 0..limits.negatives {
                match sampler.sample(rng, &p.all) {
                    Some(n) => items.push(n),
                    None => continue 'pos,
                }
            }
            examples.push(TrainingExample { user: p.user, items });
        }
    }
    examples
}

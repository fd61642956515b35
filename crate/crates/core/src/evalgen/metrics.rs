//! Ranking and distribution metrics used for offline evaluation.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user_id: String,
    pub item_id: String,
    pub label: u8,
    pub score: f64,
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Argument(format!("auc: non-finite score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U with midranks for ties.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                positive_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

pub fn auc_samples(samples: &[EvalSample]) -> Result<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    auc(&scores, &labels)
}

/// Mean over users of `|top-K ∩ read| / min(K, |read|)`.
///
/// Each entry pairs a recommendation list (already ordered by decreasing
/// score) with the user's read set. Users with an empty read set are left
/// out of the average.
pub fn prec_at_k<T: Eq + Hash>(users: &[(Vec<T>, HashSet<T>)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("prec@K needs K >= 1".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (recommended, read) in users {
        if read.is_empty() {
            continue;
        }
        let hits = recommended.iter().take(k).filter(|r| read.contains(r)).count();
        total += hits as f64 / k.min(read.len()) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "prec@K over zero users with a non-empty read set".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Expected prec@K of a uniformly random ranking of `pool` items for a
/// user who read `read` of them.
pub fn random_prec_at_k(pool: usize, read: usize, k: usize) -> f64 {
    if pool == 0 || read == 0 {
        return 0.0;
    }
    let shown = k.min(pool) as f64;
    let expected_hits = shown * read as f64 / pool as f64;
    expected_hits / k.min(read) as f64
}

/// One read of one item by one user, with a unix timestamp in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadEvent {
    pub user_id: String,
    pub item_id: String,
    pub ts: i64,
}

/// Categories and tags attached to an item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTaxonomy {
    pub categories: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub categories_per_user_day: f64,
    pub tags_per_user_day: f64,
    pub user_days: usize,
}

const SECONDS_PER_DAY: i64 = 86_400;

type DayKey<'a> = (&'a str, i64);
type DaySets<'a> = (HashSet<&'a str>, HashSet<&'a str>);

/// Average number of distinct categories and tags a user reads in one UTC day.
pub fn diversity(logs: &[ReadEvent], taxonomy: &HashMap<String, ItemTaxonomy>) -> DiversityReport {
    let mut per_day: HashMap<DayKey, DaySets> = HashMap::new();
    for ev in logs {
        let day = ev.ts.div_euclid(SECONDS_PER_DAY);
        let entry = per_day.entry((ev.user_id.as_str(), day)).or_default();
        if let Some(tax) = taxonomy.get(&ev.item_id) {
            entry.0.extend(tax.categories.iter().map(String::as_str));
            entry.1.extend(tax.tags.iter().map(String::as_str));
        }
    }
    let n = per_day.len();
    if n == 0 {
        return DiversityReport {
            categories_per_user_day: 0.0,
            tags_per_user_day: 0.0,
            user_days: 0,
        };
    }
    let (cats, tags) = per_day
        .values()
        .fold((0usize, 0usize), |(c, t), (cs, ts)| (c + cs.len(), t + ts.len()));
    DiversityReport {
        categories_per_user_day: cats as f64 / n as f64,
        tags_per_user_day: tags as f64 / n as f64,
        user_days: n,
    }
}

/// Gini coefficient of a click distribution (sorted cumulative-share form).
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::UndefinedMetric("gini of zero items".into()));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Argument("gini needs finite non-negative counts".into()));
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(Error::UndefinedMetric("gini of all-zero counts".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted.iter().enumerate().map(|(i, &x)| (i + 1) as f64 * x).sum();
    Ok((2.0 * weighted / (n * total) - (n + 1.0) / n).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn prec_examples() {
        let all_hit = vec![(vec![1, 2, 3], HashSet::from([1, 2, 3]))];
        assert_eq!(prec_at_k(&all_hit, 3).unwrap(), 1.0);
        let recs: Vec<u32> = (0..10).collect();
        let read: HashSet<u32> = HashSet::from([0, 3, 5, 7, 9]);
        assert_eq!(prec_at_k(&[(recs, read)], 10).unwrap(), 1.0);
        let none = vec![(vec![1, 2], HashSet::from([5]))];
        assert_eq!(prec_at_k(&none, 2).unwrap(), 0.0);
        let empty: Vec<(Vec<u32>, HashSet<u32>)> = vec![(vec![1], HashSet::new())];
        assert!(matches!(prec_at_k(&empty, 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn prec_skips_users_without_reads() {
        let users = vec![(vec![1, 2], HashSet::from([1])), (vec![1, 2], HashSet::new())];
        assert_eq!(prec_at_k(&users, 1).unwrap(), 1.0);
    }

    #[test]
    fn random_baseline_closed_form() {
        assert_abs_diff_eq!(random_prec_at_k(100, 5, 10), 0.1 * 5.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(random_prec_at_k(100, 20, 10), 2.0 / 10.0, epsilon = 1e-15);
    }

    fn tax(cats: &[&str], tags: &[&str]) -> ItemTaxonomy {
        ItemTaxonomy {
            categories: cats.iter().map(|s| s.to_string()).collect(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn read(u: &str, i: &str, ts: i64) -> ReadEvent {
        ReadEvent {
            user_id: u.into(),
            item_id: i.into(),
            ts,
        }
    }

    #[test]
    fn diversity_examples() {
        let taxonomy = HashMap::from([
            ("a".to_string(), tax(&["news"], &["x", "y"])),
            ("b".to_string(), tax(&["news"], &["z"])),
            ("c".to_string(), tax(&["sport"], &["x"])),
        ]);
        let d = diversity(&[read("u", "a", 10)], &taxonomy);
        assert_eq!(d.categories_per_user_day, 1.0);
        let d = diversity(&[read("u", "a", 10), read("u", "b", 20)], &taxonomy);
        assert_eq!(d.categories_per_user_day, 1.0);
        assert_eq!(d.tags_per_user_day, 3.0);
        // Day 0: u reads a, c (2 cats, tags x,y); day 1: u reads b (1 cat, 1 tag);
        // day 0: v reads c (1 cat, 1 tag). Means: cats 4/3, tags 4/3.
        let logs = [
            read("u", "a", 100),
            read("u", "c", 86_399),
            read("u", "b", 86_400),
            read("v", "c", 5),
        ];
        let d = diversity(&logs, &taxonomy);
        assert_eq!(d.user_days, 3);
        assert_abs_diff_eq!(d.categories_per_user_day, 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.tags_per_user_day, 4.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn gini_examples() {
        assert_abs_diff_eq!(gini(&[3.0, 3.0, 3.0]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gini(&[0.0, 0.0, 0.0, 7.0]).unwrap(), 0.75, epsilon = 1e-15);
        // Pairwise: Σ|xi-xj| over ordered pairs = 20, n = 4, μ = 2.5 → 20 / 80 = 0.25.
        assert_abs_diff_eq!(gini(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.25, epsilon = 1e-15);
        assert!(matches!(gini(&[0.0, 0.0]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-3.0f64..3.0, 2..40),
            flips in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            let b = auc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn gini_scale_and_permutation_invariant(
            counts in proptest::collection::vec(0.0f64..100.0, 1..30),
            c in 0.1f64..50.0,
            rot in 0usize..30,
        ) {
            prop_assume!(counts.iter().sum::<f64>() > 0.0);
            let g = gini(&counts).unwrap();
            let scaled: Vec<f64> = counts.iter().map(|x| x * c).collect();
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
            let mut rotated = counts.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            prop_assert!((gini(&rotated).unwrap() - g).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn prec_bounded_and_monotone_when_reads_cover_k(
            hits in proptest::collection::vec(any::<bool>(), 20),
            extra in 20usize..40,
        ) {
            let recs: Vec<usize> = (0..20).collect();
            let mut read: HashSet<usize> = hits.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect();
            read.extend(100..100 + extra);
            let users = vec![(recs, read)];
            let mut prev = f64::INFINITY;
            for k in 1..=20 {
                let p = prec_at_k(&users, k).unwrap();
                prop_assert!(p <= 1.0);
                // Fixed hit count, growing K: never increases.
                let fixed_hits = hits.iter().filter(|&&h| h).count();
                let q = fixed_hits as f64 / k as f64;
                prop_assert!(q <= prev + 1e-15);
                prev = q;
            }
        }
    }
}

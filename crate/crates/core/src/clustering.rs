//! Lloyd's k-means with k-means++ seeding.
//!
//! Used twice: once per training epoch on each candidate's transformed seed
//! embeddings, and by the serving worker to refresh seed centroids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lookalike::SeedsRepresentation;
use crate::numeric::DenseMatrix;
use crate::store::EmbeddingStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: DenseMatrix,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
}

impl KMeansModel {
    /// Point indices grouped by cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, &c) in self.assignments.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign(point: &[f64], model: &KMeansModel) -> usize {
    nearest(point, &model.centroids).0
}

fn nearest(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_rows(points: &DenseMatrix) -> usize {
    let mut rows: Vec<&[f64]> = points.row_iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    rows.len()
}

fn kmeans_plus_plus(points: &DenseMatrix, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let n = points.rows();
    let mut centroids = DenseMatrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if d2[chosen] == 0.0 {
                // fell off the end through rounding
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

/// Fits `min(k, distinct points)` clusters.
pub fn kmeans_fit(points: &DenseMatrix, k: usize, opts: KMeansOptions) -> Result<KMeansModel> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Argument("k-means over an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::Argument("k-means needs k >= 1".into()));
    }
    if !points.is_finite() {
        return Err(Error::Argument("k-means input contains non-finite values".into()));
    }
    let k = k.min(distinct_rows(points));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        for (i, p) in points.row_iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        repair_empty_clusters(points, &mut centroids, &mut assignments, &mut dists);
        history.push(dists.iter().sum());
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        let updated = cluster_means(points, &assignments, k, &centroids);
        let shift = centroids
            .row_iter()
            .zip(updated.row_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < opts.tol {
            for (i, p) in points.row_iter().enumerate() {
                let (c, d) = nearest(p, &centroids);
                assignments[i] = c;
                dists[i] = d;
            }
            repair_empty_clusters(points, &mut centroids, &mut assignments, &mut dists);
            history.push(dists.iter().sum());
            break;
        }
    }

    Ok(KMeansModel {
        k,
        centroids,
        inertia: *history.last().expect("at least one assignment pass"),
        iterations_run: iterations,
        assignments,
        inertia_history: history,
    })
}

fn cluster_means(points: &DenseMatrix, assignments: &[usize], k: usize, previous: &DenseMatrix) -> DenseMatrix {
    let mut sums = DenseMatrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &c) in points.row_iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(p) {
            *s += x;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            sums.row_mut(j).copy_from_slice(previous.row(j));
        } else {
            let inv = count as f64;
            sums.row_mut(j).iter_mut().for_each(|s| *s /= inv);
        }
    }
    sums
}

/// Moves the point farthest from its centroid (taken from a cluster that has
/// more than one member) into each empty cluster.
fn repair_empty_clusters(
    points: &DenseMatrix,
    centroids: &mut DenseMatrix,
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(p) = donor else { break };
        counts[assignments[p]] -= 1;
        counts[j] = 1;
        assignments[p] = j;
        dists[p] = 0.0;
        centroids.row_mut(j).copy_from_slice(points.row(p));
    }
}

/// Clusters the stored embeddings of a candidate's seed users.
///
/// Seeds without a stored embedding are skipped; the count is returned
/// alongside the representation.
pub fn seeds_to_representation<S: AsRef<str>>(
    candidate_id: &str,
    seed_user_ids: &[S],
    store: &EmbeddingStore,
    k: usize,
    opts: KMeansOptions,
    version_ts: i64,
) -> Result<(SeedsRepresentation, usize)> {
    let mut rows = Vec::with_capacity(seed_user_ids.len());
    let mut skipped = 0;
    for id in seed_user_ids {
        match store.get(id.as_ref()) {
            Some(v) => rows.push(v),
            None => skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::NoSeeds(candidate_id.to_string()));
    }
    let points = DenseMatrix::from_rows(&rows)?;
    let model = kmeans_fit(&points, k, opts)?;
    Ok((
        SeedsRepresentation {
            candidate_id: candidate_id.to_string(),
            centroids: model.centroids,
            version_ts,
        },
        skipped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingSpace;
    use approx::assert_abs_diff_eq;

    fn pts(rows: &[[f64; 2]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let p = pts(&[[0.0, 0.0], [1.0, 5.0], [3.0, -1.0]]);
        let m = kmeans_fit(&p, 3, KMeansOptions::default()).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn k_one_is_the_mean() {
        let p = pts(&[[0.0, 0.0], [1.0, 5.0], [3.0, -1.0], [0.5, 0.25]]);
        let m = kmeans_fit(&p, 1, KMeansOptions::default()).unwrap();
        let mean = p.mean_row();
        for (a, b) in m.centroids.row(0).iter().zip(&mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Best 2-partition by exhaustive enumeration.
    fn brute_force_two_means(p: &DenseMatrix) -> (f64, Vec<Vec<f64>>) {
        let n = p.rows();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let a: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let b: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
            let ca = p.select_rows(&a).mean_row();
            let cb = p.select_rows(&b).mean_row();
            let cost: f64 = a.iter().map(|&i| sq_dist(p.row(i), &ca)).sum::<f64>()
                + b.iter().map(|&i| sq_dist(p.row(i), &cb)).sum::<f64>();
            if cost < best.0 {
                best = (cost, vec![ca, cb]);
            }
        }
        best
    }

    #[test]
    fn two_separated_pairs() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let (best_cost, best_centroids) = brute_force_two_means(&p);
        assert_abs_diff_eq!(best_cost, 1.0, epsilon = 1e-12);
        let m = kmeans_fit(&p, 2, KMeansOptions::default()).unwrap();
        assert_abs_diff_eq!(m.inertia, best_cost, epsilon = 1e-12);
        let mut got: Vec<Vec<f64>> = m.centroids.row_iter().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut want = best_centroids;
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, want);
        assert_eq!(want, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn assign_examples() {
        let m = KMeansModel {
            k: 2,
            centroids: pts(&[[0.0, 0.0], [2.0, 0.0]]),
            inertia: 0.0,
            iterations_run: 0,
            assignments: vec![],
            inertia_history: vec![],
        };
        assert_eq!(assign(&[2.0, 0.0], &m), 1);
        assert_eq!(assign(&[1.0, 7.0], &m), 0);
    }

    #[test]
    fn identical_points_collapse() {
        let p = pts(&[[1.5, 2.5]; 6]);
        let m = kmeans_fit(&p, 4, KMeansOptions::default()).unwrap();
        assert_eq!(m.k, 1);
        assert_eq!(m.centroids.row(0), &[1.5, 2.5]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(kmeans_fit(&DenseMatrix::zeros(0, 2), 2, KMeansOptions::default()).is_err());
    }

    #[test]
    fn every_cluster_keeps_a_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let n = rng.random_range(3..30);
            let mut p = DenseMatrix::glorot(n, 3, &mut rng);
            // clumps make empty clusters likely
            for r in 0..n / 2 {
                let src = p.row(0).to_vec();
                p.row_mut(r).copy_from_slice(&src);
            }
            let m = kmeans_fit(
                &p,
                8,
                KMeansOptions {
                    seed: trial,
                    ..Default::default()
                },
            )
            .unwrap();
            let members = m.members();
            assert!(members.iter().all(|g| !g.is_empty()), "trial {trial}");
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DenseMatrix::glorot(40, 4, &mut rng);
        let opts = KMeansOptions {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(kmeans_fit(&p, 5, opts).unwrap(), kmeans_fit(&p, 5, opts).unwrap());
    }

    #[test]
    fn seeds_representation_skips_unknown() {
        let store = EmbeddingStore::from_rows(
            EmbeddingSpace::Lookalike,
            vec![("a".into(), vec![1.0, 2.0]), ("b".into(), vec![1.0, 2.0])],
        )
        .unwrap();
        let (rep, skipped) =
            seeds_to_representation("c", &["a", "zz"], &store, 20, KMeansOptions::default(), 7).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(rep.centroids.shape(), (1, 2));
        assert_eq!(rep.centroids.row(0), &[1.0, 2.0]);
        assert_eq!(rep.version_ts, 7);
        assert!(matches!(
            seeds_to_representation("c", &["q"], &store, 2, KMeansOptions::default(), 0),
            Err(Error::NoSeeds(_))
        ));
    }
}

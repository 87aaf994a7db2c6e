//! K-means over client representations, silhouette-based choice of K and
//! the intra-cluster heterogeneity metric.
//!
//! Assignment uses the configured metric while centers are arithmetic means
//! of member vectors, for every metric. Points are always handled in
//! ascending client-id order so results do not depend on input order.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::representations::{ClientId, Metric, Representation};
use crate::rng::stream;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Cluster membership and centers. `clients` is sorted ascending and
/// `labels[i]` is the cluster of `clients[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub clients: Vec<ClientId>,
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    /// Every client in one cluster whose center is the global mean.
    pub fn single(clients: &[ClientId], points: &[&[f64]]) -> Result<Self> {
        let (ids, pts) = canonical_order(clients, points)?;
        let labels = vec![0; ids.len()];
        let centers = vec![mean_vector(pts.iter().copied(), dim_of(&pts))];
        Ok(Self {
            clients: ids,
            labels,
            centers,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn index_of(&self, client: ClientId) -> Option<usize> {
        self.clients.binary_search(&client).ok()
    }

    pub fn cluster_of(&self, client: ClientId) -> Option<usize> {
        self.index_of(client).map(|i| self.labels[i])
    }

    pub fn members(&self, cluster: usize) -> Vec<ClientId> {
        self.clients
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Recompute every center as the mean of its members, then drop empty
    /// clusters. Returns the surviving old cluster indices in new order.
    pub fn finalize(&mut self, points: &[&[f64]]) -> Vec<usize> {
        let dim = self.centers.first().map(|c| c.len()).unwrap_or(0);
        let sizes = self.sizes();
        let survivors: Vec<usize> = (0..self.k()).filter(|&k| sizes[k] > 0).collect();
        let mut remap = vec![usize::MAX; self.k()];
        for (new, &old) in survivors.iter().enumerate() {
            remap[old] = new;
        }
        for l in self.labels.iter_mut() {
            *l = remap[*l];
        }
        self.centers = survivors
            .iter()
            .enumerate()
            .map(|(new, _)| {
                mean_vector(
                    self.labels
                        .iter()
                        .zip(points)
                        .filter(|(&l, _)| l == new)
                        .map(|(_, p)| *p),
                    dim,
                )
            })
            .collect();
        survivors
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// Mean over clients of each client's average distance to its
    /// same-cluster peers.
    pub mean_client_distance: f64,
    pub per_cluster_mean: Vec<f64>,
    /// The same quantity with every client in one global cluster.
    pub global_mean: f64,
}

/// Raw output of one k-means run, in input point order.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Objective (sum of member-to-center distances) after each Lloyd
    /// assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn dim_of(points: &[&[f64]]) -> usize {
    points.first().map(|p| p.len()).unwrap_or(0)
}

fn check_points(points: &[&[f64]]) -> Result<usize> {
    let dim = dim_of(points);
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
    }
    Ok(dim)
}

pub(crate) fn mean_vector<'a>(points: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for p in points {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn canonical_order<'a>(
    clients: &[ClientId],
    points: &[&'a [f64]],
) -> Result<(Vec<ClientId>, Vec<&'a [f64]>)> {
    if clients.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: clients.len(),
            got: points.len(),
        });
    }
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i]);
    for w in order.windows(2) {
        if clients[w[0]] == clients[w[1]] {
            return Err(Error::InvalidInput(format!(
                "client {} appears twice",
                clients[w[0]]
            )));
        }
    }
    Ok((
        order.iter().map(|&i| clients[i]).collect(),
        order.iter().map(|&i| points[i]).collect(),
    ))
}

/// Index of the nearest center; ties go to the lowest index.
pub(crate) fn nearest_center(point: &[f64], centers: &[Vec<f64>], metric: Metric) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = metric.eval_unchecked(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

// k-means++ weights: squared distance, except for the squared Euclidean
// metric which is already squared.
fn seeding_weight(d: f64, metric: Metric) -> f64 {
    match metric {
        Metric::SquaredEuclidean => d,
        _ => d * d,
    }
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, metric: Metric, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].to_vec());
    let mut weights: Vec<f64> = points
        .iter()
        .map(|p| seeding_weight(metric.eval_unchecked(p, &centers[0]), metric))
        .collect();
    while centers.len() < k {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].to_vec();
        for (w, p) in weights.iter_mut().zip(points) {
            *w = w.min(seeding_weight(metric.eval_unchecked(p, &c), metric));
        }
        centers.push(c);
    }
    centers
}

fn objective(points: &[&[f64]], labels: &[usize], centers: &[Vec<f64>], metric: Metric) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| metric.eval_unchecked(p, &centers[l]))
        .sum()
}

/// Lloyd iterations from k-means++ seeding until the assignment stops
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans_points(points: &[&[f64]], k: usize, metric: Metric, seed: u64) -> Result<KMeansFit> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Clustering("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Clustering(format!("K = {k} exceeds {n} points")));
    }
    let dim = check_points(points)?;
    let mut rng = stream(seed, "kmeans-init", &[k as u64]);
    let mut centers = kmeans_pp_init(points, k, metric, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_center(p, &centers, metric);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        // Re-seed empty clusters with the point farthest from its center.
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                sizes[labels[i]] -= 1;
                labels[i] = empty;
                sizes[empty] = 1;
                dists[i] = 0.0;
                centers[empty] = points[i].to_vec();
                changed = true;
            }
        }
        trace.push(objective(points, &labels, &centers, metric));
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if sizes[c] > 0 {
                *center = mean_vector(
                    points
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == c)
                        .map(|(p, _)| *p),
                    dim,
                );
            }
        }
    }
    Ok(KMeansFit {
        labels,
        centers,
        objective_trace: trace,
        iterations,
    })
}

/// K-means over a set of clients; output is finalized (mean centers, no
/// empty clusters) and in ascending client-id order.
pub fn kmeans(clients: &[ClientId], points: &[&[f64]], k: usize, metric: Metric, seed: u64) -> Result<ClusterAssignment> {
    let (ids, pts) = canonical_order(clients, points)?;
    let fit = kmeans_points(&pts, k, metric, seed)?;
    let mut assignment = ClusterAssignment {
        clients: ids,
        labels: fit.labels,
        centers: fit.centers,
    };
    assignment.finalize(&pts);
    Ok(assignment)
}

/// Convenience wrapper over representations of one kind.
pub fn kmeans_representations(reps: &[Representation], k: usize, metric: Metric, seed: u64) -> Result<ClusterAssignment> {
    let (ids, pts) = unpack_representations(reps)?;
    kmeans(&ids, &pts, k, metric, seed)
}

fn unpack_representations(reps: &[Representation]) -> Result<(Vec<ClientId>, Vec<&[f64]>)> {
    if let Some(first) = reps.first() {
        for r in reps {
            if r.kind() != first.kind() {
                return Err(Error::KindMismatch(first.kind().name(), r.kind().name()));
            }
        }
    }
    Ok((
        reps.iter().map(|r| r.client_id).collect(),
        reps.iter().map(|r| r.vector()).collect(),
    ))
}

/// Symmetric pairwise distance matrix, row-major.
pub fn distance_matrix(points: &[&[f64]], metric: Metric) -> Vec<f64> {
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if j > i { metric.eval_unchecked(points[i], points[j]) } else { 0.0 }).collect())
        .collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            m[i * n + j] = rows[i][j];
            m[j * n + i] = rows[i][j];
        }
    }
    m
}

fn silhouette_from_matrix(labels: &[usize], k: usize, dist: &[f64]) -> f64 {
    let n = labels.len();
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 && b.is_finite() {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Mean silhouette over clients; singleton clusters contribute 0.
pub fn silhouette_score(assignment: &ClusterAssignment, points: &[&[f64]], metric: Metric) -> Result<f64> {
    if assignment.k() < 2 {
        return Err(Error::Clustering("silhouette needs at least 2 clusters".into()));
    }
    if points.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            expected: assignment.len(),
            got: points.len(),
        });
    }
    check_points(points)?;
    let dist = distance_matrix(points, metric);
    Ok(silhouette_from_matrix(&assignment.labels, assignment.k(), &dist))
}

/// Default silhouette search range `[2, min(20, max(2, N/10), N-1)]`, or
/// `None` when fewer than three clients make the search meaningless.
pub fn default_k_range(n: usize) -> Option<(usize, usize)> {
    if n < 3 {
        return None;
    }
    let k_max = 20.min((n / 10).max(2)).min(n - 1);
    Some((2, k_max))
}

/// Runs k-means for each K in `[k_min, k_max]` and keeps the assignment with
/// the largest silhouette; ties go to the smaller K.
pub fn choose_k(
    clients: &[ClientId],
    points: &[&[f64]],
    metric: Metric,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = points.len();
    if !(2 <= k_min && k_min <= k_max && k_max <= n) {
        return Err(Error::Clustering(format!(
            "invalid K range [{k_min}, {k_max}] for {n} clients"
        )));
    }
    let (ids, pts) = canonical_order(clients, points)?;
    check_points(&pts)?;
    let dist = distance_matrix(&pts, metric);
    let candidates: Vec<Result<(f64, ClusterAssignment)>> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| {
            let fit = kmeans_points(&pts, k, metric, seed)?;
            let mut a = ClusterAssignment {
                clients: ids.clone(),
                labels: fit.labels,
                centers: fit.centers,
            };
            a.finalize(&pts);
            let score = if a.k() >= 2 {
                silhouette_from_matrix(&a.labels, a.k(), &dist)
            } else {
                f64::NEG_INFINITY
            };
            Ok((score, a))
        })
        .collect();
    let mut best: Option<(f64, ClusterAssignment)> = None;
    for c in candidates {
        let (score, a) = c?;
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, a));
        }
    }
    Ok(best.expect("non-empty K range").1)
}

pub fn choose_k_representations(
    reps: &[Representation],
    metric: Metric,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let (ids, pts) = unpack_representations(reps)?;
    choose_k(&ids, &pts, metric, k_min, k_max, seed)
}

/// Intra-cluster heterogeneity. `points` must be in the assignment's
/// client order.
pub fn mean_client_distance(assignment: &ClusterAssignment, points: &[&[f64]], metric: Metric) -> HeterogeneityReport {
    let n = assignment.len();
    let k = assignment.k();
    if n == 0 {
        return HeterogeneityReport {
            mean_client_distance: 0.0,
            per_cluster_mean: vec![0.0; k],
            global_mean: 0.0,
        };
    }
    let sizes = assignment.sizes();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut same = 0.0;
            let mut all = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = metric.eval_unchecked(points[i], points[j]);
                all += d;
                if assignment.labels[j] == assignment.labels[i] {
                    same += d;
                }
            }
            let peers = sizes[assignment.labels[i]] - 1;
            let own = if peers == 0 { 0.0 } else { same / peers as f64 };
            let global = if n > 1 { all / (n - 1) as f64 } else { 0.0 };
            (own, global)
        })
        .collect();
    let mut per_cluster = vec![0.0; k];
    for (i, (own, _)) in rows.iter().enumerate() {
        per_cluster[assignment.labels[i]] += own;
    }
    for (c, s) in per_cluster.iter_mut().enumerate() {
        if sizes[c] > 0 {
            *s /= sizes[c] as f64;
        }
    }
    HeterogeneityReport {
        mean_client_distance: rows.iter().map(|r| r.0).sum::<f64>() / n as f64,
        per_cluster_mean: per_cluster,
        global_mean: rows.iter().map(|r| r.1).sum::<f64>() / n as f64,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn refs(points: &[Vec<f64>]) -> Vec<&[f64]> {
        points.iter().map(|p| p.as_slice()).collect()
    }

    fn ids(n: usize) -> Vec<ClientId> {
        (0..n as ClientId).collect()
    }

    /// Gaussian blobs around centers spaced 2 apart on separate axes.
    pub(crate) fn blobs(per_blob: usize, k: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(seed, "blobs", &[]);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for b in 0..k {
            for _ in 0..per_blob {
                let mut p = vec![0.0; k];
                p[b] = 2.0;
                p.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                pts.push(p);
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn separated_pairs_are_grouped() {
        let pts = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.9, 0.1],
        ];
        for seed in 0..10 {
            let a = kmeans(&ids(4), &refs(&pts), 2, Metric::L1, seed).unwrap();
            assert_eq!(a.labels[0], a.labels[1]);
            assert_eq!(a.labels[2], a.labels[3]);
            assert_ne!(a.labels[0], a.labels[2]);
        }
    }

    #[test]
    fn single_cluster_center_is_global_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]];
        let a = kmeans(&ids(3), &refs(&pts), 1, Metric::L1, 3).unwrap();
        assert_eq!(a.k(), 1);
        assert_eq!(a.centers[0], vec![2.0, 3.0]);
    }

    #[test]
    fn k_larger_than_n_is_an_error() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&ids(2), &refs(&pts), 3, Metric::L1, 0).is_err());
        assert!(kmeans(&ids(2), &refs(&pts), 0, Metric::L1, 0).is_err());
    }

    #[test]
    fn three_blobs_recovered_exactly() {
        let (pts, truth) = blobs(20, 3, 0.01, 5);
        let a = kmeans(&ids(60), &refs(&pts), 3, Metric::L1, 9).unwrap();
        assert_eq!(adjusted_rand_index(&a.labels, &truth), 1.0);
    }

    #[test]
    fn silhouette_hand_example() {
        let pts = vec![vec![0.0], vec![0.0], vec![10.0]];
        let a = ClusterAssignment {
            clients: ids(3),
            labels: vec![0, 0, 1],
            centers: vec![vec![0.0], vec![10.0]],
        };
        let s = silhouette_score(&a, &refs(&pts), Metric::L1).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        let one = ClusterAssignment::single(&ids(3), &refs(&pts)).unwrap();
        assert!(silhouette_score(&one, &refs(&pts), Metric::L1).is_err());
    }

    #[test]
    fn silhouette_separated_vs_random() {
        let (pts, truth) = blobs(15, 2, 0.02, 1);
        let good = ClusterAssignment {
            clients: ids(30),
            labels: truth,
            centers: vec![vec![0.0; 2]; 2],
        };
        assert!(silhouette_score(&good, &refs(&pts), Metric::L1).unwrap() > 0.9);

        // One blob split at random into two clusters.
        let (one_blob, _) = blobs(30, 1, 0.1, 2);
        let mut rng = stream(3, "random-labels", &[]);
        let labels: Vec<usize> = (0..30).map(|i| if i < 2 { i } else { rng.gen_range(0..2) }).collect();
        let random = ClusterAssignment {
            clients: ids(30),
            labels: labels.clone(),
            centers: vec![vec![0.0]; 2],
        };
        let got = silhouette_score(&random, &refs(&one_blob), Metric::L1).unwrap();
        // Direct formula evaluation, written out independently.
        let n = 30;
        let mut oracle = 0.0;
        for i in 0..n {
            let (mut own_sum, mut own_n, mut other_sum, mut other_n) = (0.0, 0, 0.0, 0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = (one_blob[i][0] - one_blob[j][0]).abs();
                if labels[j] == labels[i] {
                    own_sum += d;
                    own_n += 1;
                } else {
                    other_sum += d;
                    other_n += 1;
                }
            }
            if own_n > 0 {
                let a = own_sum / own_n as f64;
                let b = other_sum / other_n as f64;
                oracle += (b - a) / a.max(b);
            }
        }
        oracle /= n as f64;
        assert!((got - oracle).abs() < 1e-12);
        assert!(got <= 0.1);
    }

    #[test]
    fn choose_k_examples() {
        let (pts, _) = blobs(15, 3, 0.01, 4);
        let a = choose_k(&ids(45), &refs(&pts), Metric::L1, 2, 6, 1).unwrap();
        assert_eq!(a.k(), 3);

        let same = vec![vec![0.25; 4]; 12];
        let a = choose_k(&ids(12), &refs(&same), Metric::L1, 2, 4, 1).unwrap();
        assert!(a.k() <= 2);

        let (two, _) = blobs(10, 2, 0.01, 4);
        let a = choose_k(&ids(20), &refs(&two), Metric::L1, 2, 2, 1).unwrap();
        assert_eq!(a.k(), 2);

        assert!(choose_k(&ids(20), &refs(&two), Metric::L1, 1, 3, 1).is_err());
        assert!(choose_k(&ids(20), &refs(&two), Metric::L1, 4, 3, 1).is_err());
    }

    #[test]
    fn default_k_range_rules() {
        assert_eq!(default_k_range(2), None);
        assert_eq!(default_k_range(3), Some((2, 2)));
        assert_eq!(default_k_range(50), Some((2, 5)));
        assert_eq!(default_k_range(200), Some((2, 20)));
        assert_eq!(default_k_range(5000), Some((2, 20)));
    }

    #[test]
    fn mean_client_distance_examples() {
        let same = vec![vec![0.5, 0.5]; 4];
        let a = ClusterAssignment::single(&ids(4), &refs(&same)).unwrap();
        let r = mean_client_distance(&a, &refs(&same), Metric::L1);
        assert_eq!(r.mean_client_distance, 0.0);
        assert_eq!(r.global_mean, 0.0);

        let pair = vec![vec![0.6, 0.4], vec![0.2, 0.8]];
        let a = ClusterAssignment::single(&ids(2), &refs(&pair)).unwrap();
        let r = mean_client_distance(&a, &refs(&pair), Metric::L1);
        assert!((r.mean_client_distance - 0.8).abs() < 1e-15);
    }

    #[test]
    fn singleton_peers_count_zero() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let a = ClusterAssignment {
            clients: ids(3),
            labels: vec![0, 0, 1],
            centers: vec![vec![0.5], vec![5.0]],
        };
        let r = mean_client_distance(&a, &refs(&pts), Metric::L1);
        assert!((r.mean_client_distance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_cluster_mean, vec![1.0, 0.0]);
    }

    #[test]
    fn output_is_invariant_to_input_order() {
        let (pts, _) = blobs(10, 3, 0.2, 8);
        let forward = ids(30);
        let mut order: Vec<usize> = (0..30).collect();
        order.reverse();
        let rev_ids: Vec<ClientId> = order.iter().map(|&i| forward[i]).collect();
        let rev_pts: Vec<&[f64]> = order.iter().map(|&i| pts[i].as_slice()).collect();
        let a = choose_k(&forward, &refs(&pts), Metric::L1, 2, 5, 11).unwrap();
        let b = choose_k(&rev_ids, &rev_pts, Metric::L1, 2, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(kmeans(&[1, 1], &[&[0.0], &[1.0]], 1, Metric::L1, 0).is_err());
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }
}

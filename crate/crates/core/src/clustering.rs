//! Pseudo-label generation.
//!
//! Mini-batch k-means produces a fixed number of clusters (used by CRS so
//! that scores are comparable across models). DBSCAN over a k-reciprocal
//! Jaccard distance produces the shared pseudo-labels for mutual learning.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{PegError, Result};
use crate::seed;

/// Per-sample cluster labels; `-1` marks an outlier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub num_clusters: usize,
    /// Present only for k-means results.
    pub centroids: Option<Array2<f64>>,
}

impl ClusterAssignment {
    /// Builds an assignment from arbitrary labels (negative = outlier),
    /// renumbering clusters by first occurrence.
    pub fn from_labels(labels: &[i32]) -> Self {
        let labels = canonicalize(labels);
        let num_clusters = labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0);
        Self {
            labels,
            num_clusters,
            centroids: None,
        }
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// Renumbers non-negative labels `0, 1, ...` in order of first occurrence;
/// negative labels become `-1`.
pub fn canonicalize(labels: &[i32]) -> Vec<i32> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i32;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

/// Symmetric `N x N` distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Array2<f64>);

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    /// Row-major little-endian `f32` dump for debugging.
    pub fn write_f32_le(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.0.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| PegError::io(path, e))
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact Euclidean distances, computed in parallel over rows.
pub fn pairwise_l2(features: ArrayView2<f64>) -> DistanceMatrix {
    let n = features.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let a = features.row(i);
            for j in 0..n {
                row[j] = if i == j { 0.0 } else { sq_dist(a, features.row(j)).sqrt() };
            }
        });
    DistanceMatrix(out)
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(x: ArrayView2<f64>, m: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::<f64>::zeros((m, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// Nearest-centroid assignment; empty clusters are re-seeded at the point
/// farthest from its centroid until every cluster is occupied.
fn assign_fill_empty(x: ArrayView2<f64>, centroids: &mut Array2<f64>) -> Vec<usize> {
    let m = centroids.nrows();
    let mut assigned: Vec<(usize, f64)> = (0..x.nrows()).map(|i| nearest(x.row(i), centroids)).collect();
    for attempt in 0.. {
        let mut counts = vec![0usize; m];
        for &(c, _) in &assigned {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        // farthest point among clusters that can spare one (m <= n)
        let far = (0..x.nrows())
            .filter(|&i| counts[assigned[i].0] > 1)
            .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
            .expect("a donor cluster exists when m <= n");
        centroids.row_mut(empty).assign(&x.row(far));
        if attempt < m {
            assigned = (0..x.nrows()).map(|i| nearest(x.row(i), centroids)).collect();
        } else {
            // duplicate points: the moved centroid ties with the old one
            assigned[far] = (empty, 0.0);
        }
    }
    assigned.into_iter().map(|(c, _)| c).collect()
}

fn cluster_means(x: ArrayView2<f64>, labels: &[usize], m: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((m, x.ncols()));
    let mut counts = vec![0usize; m];
    for (i, &c) in labels.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &x.row(i));
        counts[c] += 1;
    }
    for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
        row /= counts[c].max(1) as f64;
    }
    sums
}

/// Sum of squared distances of each sample to its centroid.
pub fn intra_scatter(x: ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), centroids.row(c)))
        .sum()
}

fn check_k(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(PegError::Clustering(format!(
            "cluster count {m} must be in 1..={n}"
        )));
    }
    Ok(())
}

/// Lloyd refinement until the assignment is stable (at most `max_rounds`).
/// Returns labels that are nearest-centroid with respect to the returned
/// centroids, plus the intra-scatter after each mean update.
fn lloyd(
    x: ArrayView2<f64>,
    mut centroids: Array2<f64>,
    max_rounds: usize,
) -> (Vec<usize>, Array2<f64>, Vec<f64>) {
    let m = centroids.nrows();
    let mut labels = assign_fill_empty(x, &mut centroids);
    let mut trace = Vec::new();
    for _ in 0..max_rounds {
        centroids = cluster_means(x, &labels, m);
        trace.push(intra_scatter(x, &labels, &centroids));
        let next = assign_fill_empty(x, &mut centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    (labels, centroids, trace)
}

fn finish(labels: Vec<usize>, centroids: Array2<f64>) -> ClusterAssignment {
    ClusterAssignment {
        num_clusters: centroids.nrows(),
        labels: labels.into_iter().map(|c| c as i32).collect(),
        centroids: Some(centroids),
    }
}

const POLISH_ROUNDS: usize = 50;

/// Mini-batch k-means: k-means++ seeding, `iters` mini-batch updates with
/// per-centroid `1/count` learning rates (batches drawn without replacement
/// within each pass over the data), then Lloyd polishing so labels are
/// nearest-centroid assignments at exit. Always returns `m` non-empty
/// clusters.
pub fn kmeans_minibatch(
    features: ArrayView2<f64>,
    m: usize,
    seed: u64,
    iters: usize,
    batch_size: usize,
) -> Result<ClusterAssignment> {
    let n = features.nrows();
    check_k(n, m)?;
    if iters == 0 || batch_size == 0 {
        return Err(PegError::Clustering("iters and batch_size must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut centroids = kmeans_plus_plus(features, m, &mut rng);
    let mut counts = vec![0usize; m];
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..iters {
        let mut batch = Vec::with_capacity(batch_size.min(n));
        while batch.len() < batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let nearest_c: Vec<usize> = batch.iter().map(|&i| nearest(features.row(i), &centroids).0).collect();
        for (&i, &c) in batch.iter().zip(&nearest_c) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let mut row = centroids.row_mut(c);
            row.zip_mut_with(&features.row(i), |ct, &x| *ct += eta * (x - *ct));
        }
    }
    let (labels, centroids, _) = lloyd(features, centroids, POLISH_ROUNDS);
    Ok(finish(labels, centroids))
}

/// Full-batch Lloyd k-means from k-means++ seeding. Also returns the
/// intra-scatter after every mean update (non-increasing).
pub fn kmeans_full_batch(
    features: ArrayView2<f64>,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ClusterAssignment, Vec<f64>)> {
    check_k(features.nrows(), m)?;
    let mut rng = seed::rng(seed);
    let init = kmeans_plus_plus(features, m, &mut rng);
    let (labels, centroids, trace) = lloyd(features, init, max_iters.max(1));
    Ok((finish(labels, centroids), trace))
}

/// Neighbour ranking of each row: indices sorted by (distance, index).
fn rankings(dist: &DistanceMatrix) -> Vec<Vec<usize>> {
    let n = dist.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| dist.get(i, a).total_cmp(&dist.get(i, b)).then(a.cmp(&b)));
            // self first, regardless of duplicates at distance zero
            if let Some(p) = idx.iter().position(|&j| j == i) {
                idx.remove(p);
                idx.insert(0, i);
            }
            idx
        })
        .collect()
}

/// `R(i, k)`: members of `i`'s k-nearest list (self included) whose own
/// k-nearest list contains `i`. Sorted ascending.
fn reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ranks[i][..=k]
        .iter()
        .copied()
        .filter(|&j| ranks[j][..=k].contains(&i))
        .collect();
    out.sort_unstable();
    out
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

/// Expanded k-reciprocal sets: `R(i, k1)` plus each `R(q, k1/2)` for
/// `q in R(i, k1)` that overlaps `R(i, k1)` by more than two thirds, capped
/// to the `k2` members nearest to `i`. Each set is sorted ascending.
pub fn expanded_reciprocal_sets(dist: &DistanceMatrix, k1: usize, k2: usize) -> Result<Vec<Vec<usize>>> {
    let n = dist.len();
    if k1 == 0 || k1 >= n {
        return Err(PegError::Clustering(format!("k1 = {k1} must be in 1..{n}")));
    }
    if k2 == 0 || k2 >= n {
        return Err(PegError::Clustering(format!("k2 = {k2} must be in 1..{n}")));
    }
    let ranks = rankings(dist);
    let half = (k1 as f64 / 2.0).round() as usize;
    let base: Vec<Vec<usize>> = (0..n).map(|i| reciprocal(&ranks, i, k1)).collect();
    let small: Vec<Vec<usize>> = (0..n).map(|i| reciprocal(&ranks, i, half.max(1))).collect();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut set = base[i].clone();
            for &q in &base[i] {
                let cand = &small[q];
                if 3 * sorted_intersection(&base[i], cand) > 2 * cand.len() {
                    set.extend_from_slice(cand);
                }
            }
            set.sort_unstable();
            set.dedup();
            if set.len() > k2 {
                set.sort_by(|&a, &b| dist.get(i, a).total_cmp(&dist.get(i, b)).then(a.cmp(&b)));
                set.truncate(k2);
                set.sort_unstable();
            }
            set
        })
        .collect())
}

/// Hard-set Jaccard distance `1 - |R*(i) & R*(j)| / |R*(i) | R*(j)|` over
/// expanded k-reciprocal neighbourhoods of the Euclidean distances.
pub fn k_reciprocal_jaccard(features: ArrayView2<f64>, k1: usize, k2: usize) -> Result<DistanceMatrix> {
    let l2 = pairwise_l2(features);
    let sets = expanded_reciprocal_sets(&l2, k1, k2)?;
    let n = sets.len();
    let mut out = Array2::<f64>::ones((n, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                if i == j {
                    row[j] = 0.0;
                    continue;
                }
                let inter = sorted_intersection(&sets[i], &sets[j]);
                let union = sets[i].len() + sets[j].len() - inter;
                row[j] = 1.0 - inter as f64 / union as f64;
            }
        });
    Ok(DistanceMatrix(out))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// DBSCAN on a precomputed distance matrix. A point is core when at least
/// `min_samples` points (itself included) lie within `eps`. Clusters are the
/// connected components of core points, numbered by their smallest core
/// index; a border point joins the lowest-numbered adjacent cluster. Labels
/// are then renumbered by first occurrence.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) || min_samples == 0 {
        return Err(PegError::Clustering("eps must be > 0 and min_samples >= 1".into()));
    }
    let n = dist.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut uf = UnionFind((0..n).collect());
    for i in (0..n).filter(|&i| core[i]) {
        for &j in &neighbours[i] {
            if core[j] {
                uf.union(i, j);
            }
        }
    }
    // union keeps the smallest index as root, so roots order clusters by
    // their smallest core member
    let mut cluster_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = vec![-1i32; n];
    for i in 0..n {
        if core[i] {
            let r = uf.find(i);
            if cluster_of_root[r] == usize::MAX {
                cluster_of_root[r] = next;
                next += 1;
            }
            labels[i] = cluster_of_root[r] as i32;
        }
    }
    for i in (0..n).filter(|&i| !core[i]) {
        labels[i] = neighbours[i]
            .iter()
            .filter(|&&j| core[j])
            .map(|&j| labels[j])
            .min()
            .unwrap_or(-1);
    }
    Ok(ClusterAssignment::from_labels(&labels))
}

/// Textbook breadth-first DBSCAN used as an independent check.
#[cfg(test)]
fn dbscan_bfs(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<i32> {
    let n = dist.len();
    let region = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist.get(i, j) <= eps).collect() };
    let mut labels = vec![-2i32; n];
    let mut cluster = 0;
    for p in 0..n {
        if labels[p] != -2 {
            continue;
        }
        let nb = region(p);
        if nb.len() < min_samples {
            labels[p] = -1;
            continue;
        }
        labels[p] = cluster;
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == -1 {
                labels[q] = cluster;
            }
            if labels[q] != -2 {
                continue;
            }
            labels[q] = cluster;
            let nq = region(q);
            if nq.len() >= min_samples {
                queue.extend(nq);
            }
        }
        cluster += 1;
    }
    canonicalize(&labels)
}

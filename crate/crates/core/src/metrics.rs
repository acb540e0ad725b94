//! Label-free model evaluation (ICS, CRS, DBI, silhouette), rank
//! correlations and supervised retrieval references.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::clustering::kmeans_full_batch;
use crate::embedder::{Arch, Embedder, HyperParams};
use crate::error::{PegError, Result};
use crate::train::{fit_pseudo_labels, FitConfig};

/// Intra/inter-cluster scatter of a labelled feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterReport {
    pub s_intra_per_cluster: Vec<f64>,
    pub s_intra: f64,
    pub s_inter: f64,
    /// `s_inter / s_intra`; `+inf` when the clusters have no spread.
    pub j: f64,
    /// Set when `s_intra == 0` and `s_inter > 0`.
    pub degenerate: bool,
    pub sizes: Vec<usize>,
    pub centroids: Array2<f64>,
    pub mean: Array1<f64>,
}

/// Groups non-outlier rows by label (ascending label order).
fn groups(labels: &[i32]) -> BTreeMap<i32, Vec<usize>> {
    let mut g: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            g.entry(l).or_default().push(i);
        }
    }
    g
}

fn check_len(features: ArrayView2<f64>, labels: &[i32]) -> Result<()> {
    if features.nrows() != labels.len() {
        return Err(PegError::Dimension {
            expected: features.nrows(),
            got: labels.len(),
        });
    }
    Ok(())
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// ICS of `features` under `labels`; outliers (`-1`) are ignored.
pub fn ics(features: ArrayView2<f64>, labels: &[i32]) -> Result<ScatterReport> {
    check_len(features, labels)?;
    let g = groups(labels);
    if g.is_empty() {
        return Err(PegError::Metric("no clustered samples".into()));
    }
    let d = features.ncols();
    let mut centroids = Array2::<f64>::zeros((g.len(), d));
    let mut sizes = Vec::with_capacity(g.len());
    let mut mean = Array1::<f64>::zeros(d);
    let mut total = 0usize;
    for (c, members) in g.values().enumerate() {
        let mut row = centroids.row_mut(c);
        for &i in members {
            row += &features.row(i);
            mean += &features.row(i);
        }
        row /= members.len() as f64;
        sizes.push(members.len());
        total += members.len();
    }
    mean /= total as f64;
    let s_intra_per_cluster: Vec<f64> = g
        .values()
        .enumerate()
        .map(|(c, members)| members.iter().map(|&i| sq_dist(features.row(i), centroids.row(c))).sum())
        .collect();
    let s_intra: f64 = s_intra_per_cluster.iter().sum();
    let s_inter: f64 = centroids
        .axis_iter(Axis(0))
        .zip(&sizes)
        .map(|(c, &n)| n as f64 * sq_dist(c, mean.view()))
        .sum();
    let (j, degenerate) = if s_intra > 0.0 {
        (s_inter / s_intra, false)
    } else if s_inter > 0.0 {
        (f64::INFINITY, true)
    } else {
        (0.0, false)
    };
    Ok(ScatterReport {
        s_intra_per_cluster,
        s_intra,
        s_inter,
        j,
        degenerate,
        sizes,
        centroids,
        mean,
    })
}

/// Reference-model settings for cross-reference scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrsConfig {
    pub ref_arch: Arch,
    pub ref_seed: u64,
    /// k-means cluster count, shared by every evaluated model.
    pub m: usize,
    pub ref_iters: usize,
    pub ref_lr: f64,
    pub ref_p: usize,
    pub ref_k: usize,
    pub kmeans_iters: usize,
}

impl CrsConfig {
    /// Reference settings for inputs of width `input_dim` and `m` clusters.
    pub fn for_inputs(input_dim: usize, m: usize) -> Self {
        Self {
            ref_arch: Arch {
                widths: vec![input_dim, 16],
            },
            ref_seed: 7,
            m,
            ref_iters: 300,
            ref_lr: 3.5e-3,
            ref_p: 8,
            ref_k: 4,
            kmeans_iters: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ref_arch.validate()?;
        if self.ref_iters == 0 {
            return Err(PegError::Config("ref_iters must be >= 1".into()));
        }
        if self.m < 2 {
            return Err(PegError::Config("CRS needs M >= 2".into()));
        }
        if self.ref_p == 0 || self.ref_k < 2 {
            return Err(PegError::Config("reference batches need P >= 1 and K >= 2".into()));
        }
        if !(self.ref_lr > 0.0 && self.ref_lr.is_finite()) {
            return Err(PegError::Config("ref_lr must be positive".into()));
        }
        Ok(())
    }

    fn fresh_reference(&self) -> Result<Embedder> {
        let hyper = HyperParams {
            w_mid: 0.0,
            w_mtri: 0.0,
            lr: self.ref_lr,
            ..HyperParams::default()
        };
        Embedder::init(self.ref_arch.clone(), hyper, self.ref_seed)
    }
}

/// Trains a fresh reference model on `labels` over raw `inputs` and returns
/// the ICS of its features under the same labels.
pub fn reference_scatter(inputs: ArrayView2<f64>, labels: &[i32], cfg: &CrsConfig) -> Result<ScatterReport> {
    cfg.validate()?;
    if cfg.ref_arch.input_dim() != inputs.ncols() {
        return Err(PegError::Dimension {
            expected: cfg.ref_arch.input_dim(),
            got: inputs.ncols(),
        });
    }
    let mut reference = cfg.fresh_reference()?;
    let fit = FitConfig {
        iters: cfg.ref_iters,
        p: cfg.ref_p,
        k: cfg.ref_k,
        alpha: 0.0,
        seed: crate::seed::derive_seed(cfg.ref_seed, &[1]),
    };
    fit_pseudo_labels(&mut reference, inputs, labels, &fit)?;
    let features = reference.forward_features(inputs, false)?;
    ics(features.view(), labels)
}

/// k-means pseudo-labels of an evaluated model's features.
pub fn crs_labels(evaluated: ArrayView2<f64>, cfg: &CrsConfig) -> Result<Vec<i32>> {
    cfg.validate()?;
    let seed = crate::seed::derive_seed(cfg.ref_seed, &[2]);
    Ok(kmeans_full_batch(evaluated, cfg.m, seed, cfg.kmeans_iters)?.0.labels)
}

/// Cross-reference scatter of a model whose features on `inputs` are
/// `evaluated`.
pub fn crs(evaluated: ArrayView2<f64>, inputs: ArrayView2<f64>, cfg: &CrsConfig) -> Result<f64> {
    if evaluated.nrows() != inputs.nrows() {
        return Err(PegError::Dimension {
            expected: inputs.nrows(),
            got: evaluated.nrows(),
        });
    }
    let labels = crs_labels(evaluated, cfg)?;
    Ok(reference_scatter(inputs, &labels, cfg)?.j)
}

fn require_two(g: &BTreeMap<i32, Vec<usize>>) -> Result<()> {
    if g.len() < 2 {
        return Err(PegError::Metric("need at least two clusters".into()));
    }
    Ok(())
}

/// Davies-Bouldin index (lower is better).
pub fn dbi(features: ArrayView2<f64>, labels: &[i32]) -> Result<f64> {
    check_len(features, labels)?;
    let g = groups(labels);
    require_two(&g)?;
    let rep = ics(features, labels)?;
    let spread: Vec<f64> = g
        .values()
        .enumerate()
        .map(|(c, m)| {
            m.iter()
                .map(|&i| sq_dist(features.row(i), rep.centroids.row(c)).sqrt())
                .sum::<f64>()
                / m.len() as f64
        })
        .collect();
    let k = g.len();
    let mut total = 0.0;
    for a in 0..k {
        let mut worst: f64 = 0.0;
        for b in (0..k).filter(|&b| b != a) {
            let sep = sq_dist(rep.centroids.row(a), rep.centroids.row(b)).sqrt();
            let r = if sep > 0.0 {
                (spread[a] + spread[b]) / sep
            } else {
                f64::INFINITY
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Mean silhouette coefficient; members of singleton clusters score 0.
pub fn silhouette(features: ArrayView2<f64>, labels: &[i32]) -> Result<f64> {
    check_len(features, labels)?;
    let g = groups(labels);
    require_two(&g)?;
    let clusters: Vec<&Vec<usize>> = g.values().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, members) in clusters.iter().enumerate() {
        for &i in members.iter() {
            count += 1;
            if members.len() == 1 {
                continue;
            }
            let mean_to = |m: &[usize]| {
                m.iter()
                    .filter(|&&j| j != i)
                    .map(|&j| sq_dist(features.row(i), features.row(j)).sqrt())
                    .sum::<f64>()
            };
            let a = mean_to(members) / (members.len() - 1) as f64;
            let b = clusters
                .iter()
                .enumerate()
                .filter(|&(o, _)| o != c)
                .map(|(_, m)| mean_to(m) / m.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(total / count as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PegError::Metric("correlation needs two equal-length sequences of length >= 2".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(PegError::Metric("NaN in correlation input".into()));
    }
    Ok(())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PegError::Metric("constant sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Kendall's tau-b.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].total_cmp(&xs[j]) as i64;
            let dy = ys[i].total_cmp(&ys[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant) as f64;
    let denom = ((n0 + tie_x as f64) * (n0 + tie_y as f64)).sqrt();
    if denom == 0.0 {
        return Err(PegError::Metric("constant sequence".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Retrieval accuracy of a query/gallery evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

/// Identity and camera of each row of a query or gallery set.
#[derive(Debug, Clone, Copy)]
pub struct Tags<'a> {
    pub ids: &'a [i32],
    pub cameras: &'a [i32],
}

/// mAP and CMC@{1,5,10} under Euclidean ranking. Gallery rows sharing both
/// identity and camera with a query are removed from that query's ranking.
pub fn map_cmc(
    query: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    q: Tags<'_>,
    g: Tags<'_>,
) -> Result<Retrieval> {
    if query.nrows() != q.ids.len() || gallery.nrows() != g.ids.len() || query.nrows() == 0 {
        return Err(PegError::Metric("query/gallery tags do not match features".into()));
    }
    let per_query: Vec<(f64, usize)> = (0..query.nrows())
        .map(|qi| {
            let mut ranked: Vec<(f64, usize)> = (0..gallery.nrows())
                .filter(|&gi| !(g.ids[gi] == q.ids[qi] && g.cameras[gi] == q.cameras[qi]))
                .map(|gi| (sq_dist(query.row(qi), gallery.row(gi)), gi))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hits: Vec<usize> = ranked
                .iter()
                .enumerate()
                .filter(|(_, &(_, gi))| g.ids[gi] == q.ids[qi])
                .map(|(rank, _)| rank)
                .collect();
            if hits.is_empty() {
                return Err(PegError::Metric(format!("query {qi} has no valid gallery match")));
            }
            let ap = hits
                .iter()
                .enumerate()
                .map(|(found, &rank)| (found + 1) as f64 / (rank + 1) as f64)
                .sum::<f64>()
                / hits.len() as f64;
            Ok((ap, hits[0]))
        })
        .collect::<Result<_>>()?;
    let n = per_query.len() as f64;
    let cmc = |k: usize| per_query.iter().filter(|&&(_, first)| first < k).count() as f64 / n;
    Ok(Retrieval {
        map: per_query.iter().map(|&(ap, _)| ap).sum::<f64>() / n,
        cmc1: cmc(1),
        cmc5: cmc(5),
        cmc10: cmc(10),
    })
}

/// Cluster purity: each cluster votes for its majority identity (lowest id
/// on ties); outliers are ignored.
pub fn label_accuracy(pseudo: &[i32], gt: &[i32]) -> Result<f64> {
    if pseudo.len() != gt.len() {
        return Err(PegError::Dimension {
            expected: gt.len(),
            got: pseudo.len(),
        });
    }
    let g = groups(pseudo);
    if g.is_empty() {
        return Err(PegError::Metric("all samples are outliers".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for members in g.values() {
        let mut votes: BTreeMap<i32, usize> = BTreeMap::new();
        for &i in members {
            *votes.entry(gt[i]).or_default() += 1;
        }
        correct += votes.values().copied().max().unwrap_or(0);
        total += members.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Serialisable summary of metric values. Non-finite numbers become `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_intra: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_inter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", flatten)]
    pub retrieval: Option<Retrieval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl MetricReport {
    pub fn from_scatter(s: &ScatterReport) -> Self {
        Self {
            s_intra: finite(s.s_intra),
            s_inter: finite(s.s_inter),
            j: finite(s.j),
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

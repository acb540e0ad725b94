//! Training objectives of population mutual learning.
//!
//! Every loss is a mean over the batch and returns its analytic gradient:
//! classification-style losses with respect to the pre-softmax scores,
//! triplet-style losses with respect to the embedding rows. Teacher signals
//! are plain values and never receive gradients.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;

use crate::embedder::HyperParams;
use crate::error::{PegError, Result};
use crate::seed;

/// Floor applied before taking logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// `P` pseudo-classes times `K` instances, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<i32>,
    pub p: usize,
    pub k: usize,
}

/// Draws `p` distinct non-outlier classes, then `k` members of each (without
/// replacement when the class is large enough, with replacement otherwise).
pub fn sample_pk_batch(labels: &[i32], p: usize, k: usize, seed: u64) -> Result<PkBatch> {
    sample_pk_batch_with(labels, p, k, &mut seed::rng(seed))
}

pub fn sample_pk_batch_with(labels: &[i32], p: usize, k: usize, rng: &mut seed::Rng) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(PegError::Config("P and K must be >= 1".into()));
    }
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            members.entry(l).or_default().push(i);
        }
    }
    if members.len() < p {
        return Err(PegError::Loss(format!(
            "need {p} non-outlier classes, found {}",
            members.len()
        )));
    }
    let classes: Vec<(&i32, &Vec<usize>)> = members.iter().collect();
    let mut chosen = index::sample(rng, classes.len(), p).into_vec();
    chosen.sort_unstable();
    let mut indices = Vec::with_capacity(p * k);
    let mut batch_labels = Vec::with_capacity(p * k);
    for c in chosen {
        let (&label, pool) = classes[c];
        if pool.len() >= k {
            indices.extend(index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
        } else {
            indices.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        batch_labels.extend(std::iter::repeat_n(label, k));
    }
    Ok(PkBatch {
        indices,
        labels: batch_labels,
        p,
        k,
    })
}

/// Label-smoothed target row: `1 - eps + eps/M` at `y`, `eps/M` elsewhere.
pub fn smooth_labels(y: usize, m: usize, eps: f64) -> Vec<f64> {
    let off = eps / m as f64;
    let mut row = vec![off; m];
    row[y] = 1.0 - eps + off;
    row
}

/// Loss value with its gradient and the number of clamped logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    pub clamped: usize,
}

fn check_rows(probs: ArrayView2<f64>, rows: usize) -> Result<()> {
    if probs.nrows() != rows || rows == 0 {
        return Err(PegError::Loss(format!(
            "expected {rows} probability rows, got {}",
            probs.nrows()
        )));
    }
    Ok(())
}

/// Cross entropy of `target` rows against `probs`; gradient with respect to
/// the scores that produced `probs` (targets sum to one).
fn soft_cross_entropy(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> LossOutput {
    let n = probs.nrows() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    for (p_row, t_row) in probs.axis_iter(Axis(0)).zip(targets.axis_iter(Axis(0))) {
        for (&p, &t) in p_row.iter().zip(t_row.iter()) {
            if t == 0.0 {
                continue;
            }
            if p < PROB_FLOOR {
                clamped += 1;
            }
            value -= t * p.max(PROB_FLOOR).ln();
        }
    }
    let grad = (&probs - &targets) / n;
    LossOutput {
        value: value / n,
        grad,
        clamped,
    }
}

/// Label-smoothed identity loss; `targets` are pseudo-labels in `0..M`.
pub fn id_loss(probs: ArrayView2<f64>, targets: &[usize], eps: f64) -> Result<LossOutput> {
    check_rows(probs, targets.len())?;
    let m = probs.ncols();
    let mut q = Array2::<f64>::zeros((targets.len(), m));
    for (i, &y) in targets.iter().enumerate() {
        if y >= m {
            return Err(PegError::Loss(format!("label {y} outside head of width {m}")));
        }
        q.row_mut(i).assign(&ndarray::Array1::from(smooth_labels(y, m, eps)));
    }
    Ok(soft_cross_entropy(probs, q.view()))
}

/// Which side of a mutual loss the caller wants gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    Student,
    Teacher,
}

/// Cross entropy between teacher (EMA) probabilities and the student's.
pub fn mutual_id_loss(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    wrt: GradWrt,
) -> Result<LossOutput> {
    if wrt == GradWrt::Teacher {
        return Err(PegError::StopGradient);
    }
    if student.dim() != teacher.dim() {
        return Err(PegError::Loss(format!(
            "student/teacher width mismatch: {:?} vs {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    check_rows(student, teacher.nrows())?;
    Ok(soft_cross_entropy(student, teacher))
}

/// Batch positions of an anchor's hardest positive and hardest negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardPair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn row_dist(f: ArrayView2<f64>, a: usize, b: usize) -> f64 {
    f.row(a)
        .iter()
        .zip(f.row(b).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hardest positive (farthest same-label position) and hardest negative
/// (nearest different-label position) for every anchor; ties go to the
/// lowest position.
pub fn mine_hard_pairs(features: ArrayView2<f64>, labels: &[i32]) -> Result<Vec<HardPair>> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(PegError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    (0..n)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in (0..n).filter(|&j| j != a) {
                let d = row_dist(features, a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            match (pos, neg) {
                (Some((p, _)), Some((q, _))) => Ok(HardPair {
                    anchor: a,
                    positive: p,
                    negative: q,
                }),
                (None, _) => Err(PegError::Loss(format!("anchor {a} has no positive"))),
                (_, None) => Err(PegError::Loss(format!("anchor {a} has no negative"))),
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `d_neg - d_pos` for every mined pair.
pub fn triplet_logits(features: ArrayView2<f64>, pairs: &[HardPair]) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| row_dist(features, p.anchor, p.negative) - row_dist(features, p.anchor, p.positive))
        .collect()
}

/// `P_n = e^{d_neg} / (e^{d_pos} + e^{d_neg})`, evaluated as a sigmoid.
pub fn triplet_statistic(features: ArrayView2<f64>, pairs: &[HardPair]) -> Vec<f64> {
    triplet_logits(features, pairs).into_iter().map(sigmoid).collect()
}

/// Chains `dL/d(d_neg - d_pos)` per pair back to the embedding rows.
/// Coincident rows contribute no gradient.
pub fn logit_grad_to_features(
    features: ArrayView2<f64>,
    pairs: &[HardPair],
    grad_logit: &[f64],
) -> Array2<f64> {
    let mut g = Array2::<f64>::zeros(features.raw_dim());
    for (p, &gz) in pairs.iter().zip(grad_logit) {
        if gz == 0.0 {
            continue;
        }
        for (other, sign) in [(p.negative, 1.0), (p.positive, -1.0)] {
            let d = row_dist(features, p.anchor, other);
            if d <= 0.0 {
                continue;
            }
            let scale = sign * gz / d;
            for k in 0..features.ncols() {
                let diff = features[[p.anchor, k]] - features[[other, k]];
                g[[p.anchor, k]] += scale * diff;
                g[[other, k]] -= scale * diff;
            }
        }
    }
    g
}

/// Mean of `-log P_n`, with the gradient with respect to the features.
pub fn softmax_triplet_loss(features: ArrayView2<f64>, pairs: &[HardPair]) -> Result<LossOutput> {
    if pairs.is_empty() {
        return Err(PegError::Loss("no mined pairs".into()));
    }
    let n = pairs.len() as f64;
    let logits = triplet_logits(features, pairs);
    // -log sigmoid(z) = softplus(-z)
    let value = logits
        .iter()
        .map(|&z| if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() })
        .sum::<f64>()
        / n;
    let grad_logit: Vec<f64> = logits.iter().map(|&z| (sigmoid(z) - 1.0) / n).collect();
    Ok(LossOutput {
        value,
        grad: logit_grad_to_features(features, pairs, &grad_logit),
        clamped: 0,
    })
}

/// Binary cross entropy against the teacher statistic, differentiated with
/// respect to the student's triplet logits `d_neg - d_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatLoss {
    pub value: f64,
    pub grad_logit: Vec<f64>,
    pub clamped: usize,
}

pub fn mutual_triplet_loss(student: &[f64], teacher: &[f64], wrt: GradWrt) -> Result<StatLoss> {
    if wrt == GradWrt::Teacher {
        return Err(PegError::StopGradient);
    }
    if student.len() != teacher.len() || student.is_empty() {
        return Err(PegError::Loss(format!(
            "student/teacher statistic length mismatch: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    let n = student.len() as f64;
    let mut clamped = 0;
    let mut value = 0.0;
    for (&s, &t) in student.iter().zip(teacher) {
        let sc = s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        if sc != s {
            clamped += 1;
        }
        value -= t * sc.ln() + (1.0 - t) * (1.0 - sc).ln();
    }
    Ok(StatLoss {
        value: value / n,
        grad_logit: student.iter().zip(teacher).map(|(&s, &t)| (s - t) / n).collect(),
        clamped,
    })
}

pub fn voting_loss(id_loss: f64, tri_loss: f64, w_id: f64, w_tri: f64) -> f64 {
    w_id * id_loss + w_tri * tri_loss
}

/// EMA teacher outputs on the batch, captured before any student update.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    pub model_id: u64,
    pub features: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Teacher soft labels for one student: probabilities plus the teacher's
/// triplet statistic evaluated on the student's mined pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals {
    pub probs: Array2<f64>,
    pub stat: Vec<f64>,
}

impl TeacherSignals {
    pub fn from_snapshot(snapshot: &TeacherSnapshot, pairs: &[HardPair]) -> Self {
        Self {
            probs: snapshot.probs.clone(),
            stat: triplet_statistic(snapshot.features.view(), pairs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub id: f64,
    pub tri: f64,
    pub vot: f64,
    /// Sum over teachers, before the `1/|E|` factor.
    pub mid: f64,
    pub mtri: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallLoss {
    pub value: f64,
    pub parts: LossParts,
    pub d_features: Array2<f64>,
    pub d_scores: Array2<f64>,
    pub clamped: usize,
}

/// Student outputs on a batch, produced with the current parameters.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs<'a> {
    pub features: ArrayView2<'a, f64>,
    pub probs: ArrayView2<'a, f64>,
}

/// `(1/|E|) (w_mid sum_e L_mid + w_mtri sum_e L_mtri) + w_id L_id + w_tri L_tri`
/// using the student's own hyper-parameters. The divisor is the number of
/// teachers actually supplied.
pub fn overall_loss(
    student: StudentOutputs<'_>,
    targets: &[usize],
    pairs: &[HardPair],
    teachers: &[TeacherSignals],
    hyper: &HyperParams,
) -> Result<OverallLoss> {
    let mutual = hyper.w_mid > 0.0 || hyper.w_mtri > 0.0;
    if teachers.is_empty() && mutual {
        return Err(PegError::EmptyTeacherSet);
    }
    let id = id_loss(student.probs, targets, hyper.eps)?;
    let tri = softmax_triplet_loss(student.features, pairs)?;
    let mut d_scores = id.grad * hyper.w_id;
    let mut d_features = tri.grad * hyper.w_tri;
    let mut clamped = id.clamped;
    let mut parts = LossParts {
        id: id.value,
        tri: tri.value,
        vot: voting_loss(id.value, tri.value, hyper.w_id, hyper.w_tri),
        ..LossParts::default()
    };
    let mut value = parts.vot;
    if !teachers.is_empty() {
        let inv = 1.0 / teachers.len() as f64;
        let stat = triplet_statistic(student.features, pairs);
        let mut grad_logit = vec![0.0; pairs.len()];
        for t in teachers {
            let mid = mutual_id_loss(student.probs, t.probs.view(), GradWrt::Student)?;
            let mtri = mutual_triplet_loss(&stat, &t.stat, GradWrt::Student)?;
            parts.mid += mid.value;
            parts.mtri += mtri.value;
            clamped += mid.clamped + mtri.clamped;
            d_scores.scaled_add(hyper.w_mid * inv, &mid.grad);
            for (g, gm) in grad_logit.iter_mut().zip(&mtri.grad_logit) {
                *g += hyper.w_mtri * inv * gm;
            }
        }
        value += inv * (hyper.w_mid * parts.mid + hyper.w_mtri * parts.mtri);
        d_features += &logit_grad_to_features(student.features, pairs, &grad_logit);
    }
    Ok(OverallLoss {
        value,
        parts,
        d_features,
        d_scores,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::softmax_rows;
    use ndarray::array;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, compared entrywise to `grad`.
    fn check_grad(x: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) {
        let h = 1e-4;
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = grad[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-4, "at {idx:?}: analytic {ana}, numeric {num}");
        }
    }

    #[test]
    fn pk_sampling() {
        let b = sample_pk_batch(&[0, 0, 1, 1], 2, 2, 3).unwrap();
        let mut idx = b.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let b = sample_pk_batch(&[0, 1, 1, 1, -1], 2, 3, 1).unwrap();
        assert_eq!(&b.indices[..3], &[0, 0, 0]);
        assert!(!b.indices.contains(&4));
        assert!(sample_pk_batch(&[-1, -1, -1], 1, 2, 0).is_err());
        assert_eq!(
            sample_pk_batch(&[0, 0, 1, 1, 2, 2], 2, 2, 5).unwrap(),
            sample_pk_batch(&[0, 0, 1, 1, 2, 2], 2, 2, 5).unwrap()
        );
    }

    #[test]
    fn smoothing_rows() {
        let row = smooth_labels(2, 5, 0.1);
        assert!((row[2] - 0.92).abs() < 1e-12);
        assert!((row[0] - 0.02).abs() < 1e-12);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((smooth_labels(0, 3, 1e-12)[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn id_loss_values() {
        let uniform = Array2::from_elem((3, 4), 0.25);
        let l = id_loss(uniform.view(), &[0, 1, 3], 0.1).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let onehot = array![[0.0, 1.0, 0.0]];
        let l = id_loss(onehot.view(), &[1], 1e-15).unwrap();
        assert!(l.value < 1e-9);
        assert!(l.clamped > 0);
        assert!(id_loss(onehot.view(), &[3], 0.1).is_err());
    }

    #[test]
    fn id_loss_gradient() {
        for seed in 0..3 {
            let scores = random(5, 4, seed) * 3.0;
            let targets = [0, 3, 1, 1, 2];
            let out = id_loss(softmax_rows(&scores).view(), &targets, 0.1).unwrap();
            check_grad(&scores, &out.grad, |s| {
                id_loss(softmax_rows(s).view(), &targets, 0.1).unwrap().value
            });
        }
    }

    #[test]
    fn mining_rules() {
        let f = array![[0.0], [1.0], [0.5], [3.0], [0.2]];
        let labels = [0, 0, 1, 1, 0];
        let pairs = mine_hard_pairs(f.view(), &labels).unwrap();
        assert_eq!(pairs[0].positive, 1);
        assert_eq!(pairs[0].negative, 2);

        // anchor 0, positives at 1 and 5, negative at 2
        let f = array![[0.0], [1.0], [2.0], [9.0], [9.5], [5.0]];
        let pairs = mine_hard_pairs(f.view(), &[0, 0, 1, 1, 1, 0]).unwrap();
        assert_eq!((pairs[0].positive, pairs[0].negative), (5, 2));

        let same = Array2::<f64>::zeros((4, 2));
        let pairs = mine_hard_pairs(same.view(), &[0, 0, 1, 1]).unwrap();
        assert_eq!((pairs[0].positive, pairs[0].negative), (1, 2));
        assert_eq!((pairs[3].positive, pairs[3].negative), (2, 0));

        assert!(mine_hard_pairs(f.view(), &[0, 1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn triplet_statistic_values() {
        let f = array![[0.0], [1.0], [-2.0]];
        let pair = [HardPair {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        let s = triplet_statistic(f.view(), &pair)[0];
        let e = 1f64.exp();
        assert!((s - e * e / (e + e * e)).abs() < 1e-12);
        assert!((s - 0.7311).abs() < 1e-4);

        let eq = array![[0.0], [1.0], [-1.0]];
        assert_eq!(triplet_statistic(eq.view(), &pair)[0], 0.5);
        let l = softmax_triplet_loss(eq.view(), &pair).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);

        let far = array![[0.0], [0.0], [100.0]];
        assert!(triplet_statistic(far.view(), &pair)[0] > 1.0 - 1e-12);
        assert!(softmax_triplet_loss(far.view(), &pair).unwrap().value < 1e-12);
    }

    #[test]
    fn softmax_triplet_gradient() {
        for seed in 0..3 {
            let f = random(6, 3, 10 + seed);
            let labels = [0, 0, 1, 1, 2, 2];
            let pairs = mine_hard_pairs(f.view(), &labels).unwrap();
            let out = softmax_triplet_loss(f.view(), &pairs).unwrap();
            check_grad(&f, &out.grad, |x| softmax_triplet_loss(x.view(), &pairs).unwrap().value);
        }
    }

    #[test]
    fn voting_values() {
        assert_eq!(voting_loss(1.3, 0.7, 1.0, 0.0), 1.3);
        assert_eq!(voting_loss(1.3, 0.7, 0.0, 0.0), 0.0);
        assert_eq!(voting_loss(1.0, 0.25, 0.5, 2.0), 1.0);
    }

    #[test]
    fn mutual_id_values() {
        let t = array![[0.0, 1.0]];
        let s = array![[0.0, 1.0]];
        assert_eq!(mutual_id_loss(s.view(), t.view(), GradWrt::Student).unwrap().value, 0.0);
        let u = Array2::from_elem((2, 4), 0.25);
        let l = mutual_id_loss(u.view(), u.view(), GradWrt::Student).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            mutual_id_loss(u.view(), u.view(), GradWrt::Teacher),
            Err(PegError::StopGradient)
        ));
        let narrow = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert!(mutual_id_loss(u.view(), narrow.view(), GradWrt::Student).is_err());
    }

    #[test]
    fn mutual_id_gradient() {
        for seed in 0..3 {
            let scores = random(4, 5, 20 + seed) * 2.0;
            let teacher = softmax_rows(&(random(4, 5, 30 + seed) * 2.0));
            let out = mutual_id_loss(softmax_rows(&scores).view(), teacher.view(), GradWrt::Student).unwrap();
            check_grad(&scores, &out.grad, |s| {
                mutual_id_loss(softmax_rows(s).view(), teacher.view(), GradWrt::Student)
                    .unwrap()
                    .value
            });
        }
    }

    #[test]
    fn mutual_triplet_values() {
        let l = mutual_triplet_loss(&[0.5], &[0.5], GradWrt::Student).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let l = mutual_triplet_loss(&[1.0 - 1e-15], &[1.0], GradWrt::Student).unwrap();
        assert!(l.value < 1e-11);
        assert_eq!(l.clamped, 1);
        // minimum at s = t
        let t = 0.3;
        let at = |s: f64| mutual_triplet_loss(&[s], &[t], GradWrt::Student).unwrap().value;
        assert!(at(t) < at(t + 1e-3) && at(t) < at(t - 1e-3));
        assert!(mutual_triplet_loss(&[0.5], &[0.5], GradWrt::Teacher).is_err());
    }

    #[test]
    fn mutual_triplet_gradient_through_features() {
        for seed in 0..3 {
            let f = random(6, 3, 40 + seed);
            let teacher = random(6, 3, 50 + seed);
            let labels = [0, 0, 1, 1, 2, 2];
            let pairs = mine_hard_pairs(f.view(), &labels).unwrap();
            let t = triplet_statistic(teacher.view(), &pairs);
            let loss = |x: &Array2<f64>| {
                let s = triplet_statistic(x.view(), &pairs);
                mutual_triplet_loss(&s, &t, GradWrt::Student).unwrap()
            };
            let out = loss(&f);
            let g = logit_grad_to_features(f.view(), &pairs, &out.grad_logit);
            check_grad(&f, &g, |x| loss(x).value);
        }
    }

    fn overall_fixture(seed: u64) -> (Array2<f64>, Array2<f64>, Vec<usize>, Vec<HardPair>, Vec<TeacherSignals>) {
        let feats = random(6, 3, 60 + seed);
        let scores = random(6, 3, 70 + seed) * 2.0;
        let targets = vec![0, 0, 1, 1, 2, 2];
        let labels: Vec<i32> = targets.iter().map(|&t| t as i32).collect();
        let pairs = mine_hard_pairs(feats.view(), &labels).unwrap();
        let teachers = (0..2)
            .map(|t| {
                let snap = TeacherSnapshot {
                    model_id: t,
                    features: random(6, 3, 80 + seed + 10 * t),
                    probs: softmax_rows(&random(6, 3, 90 + seed + 10 * t)),
                };
                TeacherSignals::from_snapshot(&snap, &pairs)
            })
            .collect();
        (feats, scores, targets, pairs, teachers)
    }

    #[test]
    fn overall_composition() {
        let (f, s, targets, pairs, teachers) = overall_fixture(0);
        let probs = softmax_rows(&s);
        let student = StudentOutputs {
            features: f.view(),
            probs: probs.view(),
        };
        let hyper = HyperParams::default();
        let one = overall_loss(student, &targets, &pairs, &teachers[..1], &hyper).unwrap();
        let p = one.parts;
        let expected = hyper.w_mid * p.mid + hyper.w_mtri * p.mtri + p.vot;
        assert!((one.value - expected).abs() < 1e-12);

        let vot_only = HyperParams {
            w_mid: 0.0,
            w_mtri: 0.0,
            ..hyper
        };
        let l = overall_loss(student, &targets, &pairs, &[], &vot_only).unwrap();
        assert!((l.value - l.parts.vot).abs() < 1e-15);
        assert!(matches!(
            overall_loss(student, &targets, &pairs, &[], &hyper),
            Err(PegError::EmptyTeacherSet)
        ));
    }

    #[test]
    fn overall_gradients() {
        for seed in 0..3 {
            let (f, s, targets, pairs, teachers) = overall_fixture(seed);
            let hyper = HyperParams::default();
            let eval = |f: &Array2<f64>, s: &Array2<f64>| {
                let probs = softmax_rows(s);
                overall_loss(
                    StudentOutputs {
                        features: f.view(),
                        probs: probs.view(),
                    },
                    &targets,
                    &pairs,
                    &teachers,
                    &hyper,
                )
                .unwrap()
            };
            let out = eval(&f, &s);
            check_grad(&f, &out.d_features, |x| eval(x, &s).value);
            check_grad(&s, &out.d_scores, |x| eval(&f, x).value);
        }
    }
}

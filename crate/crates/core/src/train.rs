//! Single optimisation steps and short supervised fits on pseudo-labels.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, HyperParams};
use crate::error::{PegError, Result};
use crate::objectives::{
    mine_hard_pairs, overall_loss, sample_pk_batch_with, LossParts, StudentOutputs, TeacherSignals,
    TeacherSnapshot,
};
use crate::seed;

/// Decoupled weight decay applied on every Adam step.
pub const WEIGHT_DECAY: f64 = 5e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub parts: LossParts,
    pub clamped: usize,
}

/// Feature-space augmentation: additive Gaussian noise, then with
/// probability `erase_prob` one contiguous block of up to `erase_max * D`
/// features is zeroed per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub noise_std: f64,
    pub erase_prob: f64,
    pub erase_max: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            erase_prob: 0.5,
            erase_max: 0.25,
        }
    }
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        noise_std: 0.0,
        erase_prob: 0.0,
        erase_max: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && (0.0..=1.0).contains(&self.erase_prob)
            && (0.0..=1.0).contains(&self.erase_max);
        if ok {
            Ok(())
        } else {
            Err(PegError::Config(format!("invalid jitter {self:?}")))
        }
    }

    pub fn is_none(&self) -> bool {
        self.noise_std == 0.0 && (self.erase_prob == 0.0 || self.erase_max == 0.0)
    }

    pub fn apply(&self, x: ArrayView2<f64>, rng: &mut seed::Rng) -> Array2<f64> {
        let mut out = x.to_owned();
        if self.is_none() {
            return out;
        }
        let d = out.ncols();
        let normal = Normal::new(0.0, self.noise_std).expect("finite std");
        let longest = ((self.erase_max * d as f64).round() as usize).min(d);
        for mut row in out.rows_mut() {
            if self.noise_std > 0.0 {
                row.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
            if longest > 0 && rng.random_bool(self.erase_prob) {
                let len = rng.random_range(1..=longest);
                let start = rng.random_range(0..=d - len);
                row.slice_mut(s![start..start + len]).fill(0.0);
            }
        }
        out
    }

    /// A view of `x` drawn from `model`'s own stream at its current step,
    /// so the draw does not depend on which other models train alongside.
    pub fn view_for(&self, model: &Embedder, x: ArrayView2<f64>) -> Array2<f64> {
        let mut rng = seed::derived_rng(model.rng_stream, &[model.opt.t]);
        self.apply(x, &mut rng)
    }
}

/// Gathers the rows of `x` at `indices`.
pub fn gather(x: ArrayView2<f64>, indices: &[usize]) -> Array2<f64> {
    x.select(Axis(0), indices)
}

/// Captures a model's EMA outputs on a batch.
pub fn snapshot(model: &Embedder, batch: ArrayView2<f64>) -> Result<TeacherSnapshot> {
    let cache = crate::embedder::forward_pass(&model.ema_params, batch)?;
    Ok(TeacherSnapshot {
        model_id: model.model_id,
        probs: cache.probs(),
        features: cache.features,
    })
}

/// One update of `model` on `batch` with pseudo-labels `labels` (all in
/// `0..M`): forward, hard mining, the combined loss against `teachers`,
/// backward, Adam and the EMA update. Without teachers the mutual terms are
/// dropped.
pub fn train_step(
    model: &mut Embedder,
    batch: ArrayView2<f64>,
    labels: &[i32],
    teachers: &[TeacherSnapshot],
    alpha: f64,
) -> Result<StepReport> {
    let hyper = if teachers.is_empty() {
        HyperParams {
            w_mid: 0.0,
            w_mtri: 0.0,
            ..model.hyper
        }
    } else {
        model.hyper
    };
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| usize::try_from(l).map_err(|_| PegError::Loss("outlier in batch".into())))
        .collect::<Result<_>>()?;
    let cache = model.forward_train(batch)?;
    let features = cache.features.clone();
    let probs = cache.probs();
    let pairs = mine_hard_pairs(features.view(), labels)?;
    let signals: Vec<TeacherSignals> = teachers
        .iter()
        .map(|t| TeacherSignals::from_snapshot(t, &pairs))
        .collect();
    let loss = overall_loss(
        StudentOutputs {
            features: features.view(),
            probs: probs.view(),
        },
        &targets,
        &pairs,
        &signals,
        &hyper,
    )?;
    if !loss.value.is_finite() {
        return Err(PegError::NonFinite("loss"));
    }
    let grads = model.backward(loss.d_features.view(), loss.d_scores.view())?;
    model.adam_step(&grads, model.hyper.lr, WEIGHT_DECAY)?;
    model.ema_update(alpha)?;
    Ok(StepReport {
        loss: loss.value,
        parts: loss.parts,
        clamped: loss.clamped,
    })
}

/// Settings of a plain pseudo-label fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub p: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Resets the head to `M = max label + 1` classes and runs `iters` PK-batch
/// steps on `labels` (outliers never sampled). Returns the mean loss.
pub fn fit_pseudo_labels(model: &mut Embedder, x: ArrayView2<f64>, labels: &[i32], cfg: &FitConfig) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(PegError::Dimension {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let m = labels.iter().copied().max().unwrap_or(-1) + 1;
    if m < 2 {
        return Err(PegError::Loss("need at least two pseudo-classes".into()));
    }
    model.resize_classifier(m as usize, seed::derive_seed(cfg.seed, &[0]))?;
    let classes = {
        let mut seen = vec![false; m as usize];
        labels.iter().filter(|&&l| l >= 0).for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    let p = cfg.p.min(classes);
    let mut rng = seed::derived_rng(cfg.seed, &[1]);
    let mut total = 0.0;
    for _ in 0..cfg.iters {
        let pk = sample_pk_batch_with(labels, p, cfg.k, &mut rng)?;
        let batch = gather(x, &pk.indices);
        total += train_step(model, batch.view(), &pk.labels, &[], cfg.alpha)?.loss;
    }
    Ok(total / cfg.iters.max(1) as f64)
}

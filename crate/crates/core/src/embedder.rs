//! The population member: a small feed-forward embedder with a linear
//! classifier head, hand-written reverse mode, Adam and an EMA copy.
//!
//! Layer `l` maps `widths[l] -> widths[l + 1]`; hidden layers apply
//! softplus, the last layer is linear and its output is the embedding.
//! The classifier maps embeddings to `M` class scores.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PegError, Result};
use crate::seed;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Layer widths from input to embedding, e.g. `[32, 64, 16]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub widths: Vec<usize>,
}

impl Arch {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let arch = Self { widths };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(PegError::Config(format!(
                "architecture {:?} needs >= 2 positive widths",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Per-model hyper-parameters `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Label smoothing.
    pub eps: f64,
    pub w_id: f64,
    pub w_tri: f64,
    pub w_mid: f64,
    pub w_mtri: f64,
    pub lr: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eps: 0.1,
            w_id: 0.5,
            w_tri: 0.5,
            w_mid: 0.5,
            w_mtri: 0.8,
            lr: 3.5e-3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(PegError::Config(format!("eps {} not in (0, 1)", self.eps)));
        }
        for (name, w) in [
            ("w_id", self.w_id),
            ("w_tri", self.w_tri),
            ("w_mid", self.w_mid),
            ("w_mtri", self.w_mtri),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(PegError::Config(format!("{name} = {w} must be >= 0")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PegError::Config(format!("lr {} must be > 0", self.lr)));
        }
        Ok(())
    }

    /// Values in a fixed order, used by mutation and reports.
    pub fn to_array(&self) -> [f64; 6] {
        [self.eps, self.w_id, self.w_tri, self.w_mid, self.w_mtri, self.lr]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            eps: v[0],
            w_id: v[1],
            w_tri: v[2],
            w_mid: v[3],
            w_mtri: v[4],
            lr: v[5],
        }
    }

    pub const NAMES: [&'static str; 6] = ["eps", "w_id", "w_tri", "w_mid", "w_mtri", "lr"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Learnable tensors of one model; also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub layers: Vec<Layer>,
    /// `M x embed_dim`
    pub classifier: Array2<f64>,
}

impl EmbedderParams {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            classifier: Array2::zeros(other.classifier.raw_dim()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.nrows()
    }

    /// Tensors in declared order: `w0, b0, w1, b1, ..., classifier`.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.classifier.as_slice().expect("standard layout"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.classifier.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.shape().to_vec());
            out.push(l.bias.shape().to_vec());
        }
        out.push(self.classifier.shape().to_vec());
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }

    fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Activations kept for reverse mode.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub features: Array2<f64>,
    pub scores: Array2<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> Array2<f64> {
        softmax_rows(&self.scores)
    }
}

/// Forward pass of `params` on `x`, keeping everything reverse mode needs.
pub fn forward_pass(params: &EmbedderParams, x: ArrayView2<f64>) -> Result<ForwardCache> {
    let in_dim = params.layers[0].weight.ncols();
    if x.ncols() != in_dim {
        return Err(PegError::Dimension {
            expected: in_dim,
            got: x.ncols(),
        });
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut h = x.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weight.t()) + &layer.bias;
        inputs.push(h);
        if l < last {
            h = z.mapv(softplus);
            pre.push(z);
        } else {
            h = z;
        }
    }
    let scores = h.dot(&params.classifier.t());
    Ok(ForwardCache {
        inputs,
        pre,
        features: h,
        scores,
    })
}

/// Gradients of a scalar loss given `dL/dfeatures` and `dL/dscores`.
pub fn backward_pass(
    params: &EmbedderParams,
    cache: &ForwardCache,
    d_features: ArrayView2<f64>,
    d_scores: ArrayView2<f64>,
) -> Result<EmbedderParams> {
    let b = cache.features.nrows();
    if d_features.dim() != cache.features.dim() {
        return Err(PegError::Dimension {
            expected: cache.features.ncols() * b,
            got: d_features.len(),
        });
    }
    if d_scores.dim() != cache.scores.dim() {
        return Err(PegError::Dimension {
            expected: cache.scores.ncols() * b,
            got: d_scores.len(),
        });
    }
    let mut grads = EmbedderParams::zeros_like(params);
    grads.classifier = d_scores.t().dot(&cache.features);
    let mut delta = d_features.to_owned() + d_scores.dot(&params.classifier);
    for l in (0..params.layers.len()).rev() {
        grads.layers[l].weight = delta.t().dot(&cache.inputs[l]);
        grads.layers[l].bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&params.layers[l].weight);
            back.zip_mut_with(&cache.pre[l - 1], |g, &z| *g *= sigmoid(z));
            delta = back;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EmbedderParams,
    pub v: EmbedderParams,
    pub t: u64,
}

/// One population member `M(theta, phi)` with its EMA copy `Theta`.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub model_id: u64,
    pub lineage: Option<u64>,
    pub arch: Arch,
    pub params: EmbedderParams,
    pub ema_params: EmbedderParams,
    pub hyper: HyperParams,
    pub opt: AdamState,
    pub rng_stream: u64,
    cache: Option<ForwardCache>,
}

impl PartialEq for Embedder {
    fn eq(&self, other: &Self) -> bool {
        self.model_id == other.model_id
            && self.lineage == other.lineage
            && self.arch == other.arch
            && self.params == other.params
            && self.ema_params == other.ema_params
            && self.hyper == other.hyper
            && self.opt == other.opt
            && self.rng_stream == other.rng_stream
    }
}

fn uniform_matrix(rng: &mut seed::Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn init_head(embed_dim: usize, classes: usize, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed);
    uniform_matrix(&mut rng, classes, embed_dim, 1.0 / (embed_dim as f64).sqrt())
}

impl Embedder {
    /// Fan-in scaled uniform weights, zero biases and a single-class head.
    /// The EMA copy starts equal to the parameters.
    pub fn init(arch: Arch, hyper: HyperParams, seed: u64) -> Result<Self> {
        arch.validate()?;
        hyper.validate()?;
        let mut rng = seed::derived_rng(seed, &[0]);
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weight: uniform_matrix(&mut rng, w[1], w[0], bound),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        let params = EmbedderParams {
            layers,
            classifier: init_head(arch.embed_dim(), 1, seed::derive_seed(seed, &[1])),
        };
        Ok(Self {
            model_id: 0,
            lineage: None,
            arch,
            ema_params: params.clone(),
            opt: AdamState {
                m: EmbedderParams::zeros_like(&params),
                v: EmbedderParams::zeros_like(&params),
                t: 0,
            },
            params,
            hyper,
            rng_stream: seed,
            cache: None,
        })
    }

    pub fn with_id(mut self, model_id: u64) -> Self {
        self.model_id = model_id;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn select(&self, use_ema: bool) -> &EmbedderParams {
        if use_ema {
            &self.ema_params
        } else {
            &self.params
        }
    }

    pub fn forward_features(&self, batch: ArrayView2<f64>, use_ema: bool) -> Result<Array2<f64>> {
        Ok(forward_pass(self.select(use_ema), batch)?.features)
    }

    pub fn forward_confidence(&self, batch: ArrayView2<f64>, use_ema: bool) -> Result<Array2<f64>> {
        if self.num_classes() == 0 {
            return Err(PegError::Config("classifier head has zero classes".into()));
        }
        Ok(forward_pass(self.select(use_ema), batch)?.probs())
    }

    /// Forward pass with `theta`, caching activations for [`Embedder::backward`].
    pub fn forward_train(&mut self, batch: ArrayView2<f64>) -> Result<&ForwardCache> {
        let cache = forward_pass(&self.params, batch)?;
        self.cache = Some(cache);
        Ok(self.cache.as_ref().unwrap())
    }

    /// Consumes the cached forward pass.
    pub fn backward(
        &mut self,
        d_features: ArrayView2<f64>,
        d_scores: ArrayView2<f64>,
    ) -> Result<EmbedderParams> {
        let cache = self.cache.take().ok_or(PegError::NoCachedForward)?;
        backward_pass(&self.params, &cache, d_features, d_scores)
    }

    /// Re-initialises the head of both `theta` and `Theta` at `new_m` classes
    /// and zeroes its Adam moments. The body is untouched.
    pub fn resize_classifier(&mut self, new_m: usize, seed: u64) -> Result<()> {
        if new_m == 0 {
            return Err(PegError::Config("classifier needs at least one class".into()));
        }
        let head = init_head(self.arch.embed_dim(), new_m, seed);
        self.set_classifier(head)
    }

    /// Installs `head` (`M x embed_dim`) in both parameter copies.
    pub fn set_classifier(&mut self, head: Array2<f64>) -> Result<()> {
        if head.ncols() != self.arch.embed_dim() || head.nrows() == 0 {
            return Err(PegError::Dimension {
                expected: self.arch.embed_dim(),
                got: head.ncols(),
            });
        }
        let zeros = Array2::zeros(head.raw_dim());
        self.opt.m.classifier = zeros.clone();
        self.opt.v.classifier = zeros;
        self.ema_params.classifier = head.clone();
        self.params.classifier = head;
        self.cache = None;
        Ok(())
    }

    /// Adam with bias correction and decoupled weight decay.
    pub fn adam_step(&mut self, grads: &EmbedderParams, lr: f64, weight_decay: f64) -> Result<()> {
        if !grads.same_shape(&self.params) {
            return Err(PegError::Config("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(PegError::NonFinite("gradient"));
        }
        self.opt.t += 1;
        let t = self.opt.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let params = self.params.slices_mut();
        let ms = self.opt.m.slices_mut();
        let vs = self.opt.v.slices_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.slices()) {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                p[i] -= lr * (step + weight_decay * p[i]);
            }
        }
        Ok(())
    }

    /// `Theta <- alpha * Theta + (1 - alpha) * theta` on every tensor.
    pub fn ema_update(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PegError::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if !self.ema_params.same_shape(&self.params) {
            return Err(PegError::Config("EMA and parameter shapes differ".into()));
        }
        for (e, p) in self.ema_params.slices_mut().into_iter().zip(self.params.slices()) {
            for (x, y) in e.iter_mut().zip(p) {
                *x = alpha * *x + (1.0 - alpha) * y;
            }
        }
        Ok(())
    }

    /// Rounds all state to `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        self.params.round_to_f32();
        self.ema_params.round_to_f32();
        self.opt.m.round_to_f32();
        self.opt.v.round_to_f32();
        self.cache = None;
    }

    /// Copy with a new identity; parameters, EMA and optimizer state are kept.
    pub fn clone_as(&self, model_id: u64, rng_stream: u64) -> Self {
        let mut c = self.clone();
        c.model_id = model_id;
        c.lineage = Some(self.model_id);
        c.rng_stream = rng_stream;
        c.cache = None;
        c
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    hyper: HyperParams,
    lineage: Option<u64>,
    model_id: u64,
    timestep: u64,
    rng_stream: u64,
    num_classes: usize,
    shapes: Vec<Vec<usize>>,
    blobs: Vec<String>,
}

const BLOBS: [&str; 4] = ["params", "ema_params", "adam_m", "adam_v"];

/// Writes a JSON header line followed by little-endian `f32` blobs for
/// `params`, `ema_params` and both Adam moments, each in declared tensor
/// order.
pub fn write_checkpoint(m: &Embedder, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        arch: m.arch.clone(),
        hyper: m.hyper,
        lineage: m.lineage,
        model_id: m.model_id,
        timestep: m.opt.t,
        rng_stream: m.rng_stream,
        num_classes: m.num_classes(),
        shapes: m.params.shapes(),
        blobs: BLOBS.iter().map(|s| s.to_string()).collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for p in [&m.params, &m.ema_params, &m.opt.m, &m.opt.v] {
        for s in p.slices() {
            for &v in s {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| PegError::io(path, e))?;
    f.write_all(&buf).map_err(|e| PegError::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Embedder> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PegError::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PegError::Checkpoint(format!("{}: missing header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let mut m = Embedder::init(header.arch.clone(), header.hyper, 0)?;
    m.resize_classifier(header.num_classes, 0)?;
    if m.params.shapes() != header.shapes {
        return Err(PegError::Checkpoint(format!(
            "{}: tensor shapes do not match architecture",
            path.display()
        )));
    }
    let per_blob = m.params.to_flat().len();
    let body = &bytes[nl + 1..];
    if body.len() != 4 * per_blob * BLOBS.len() {
        return Err(PegError::Checkpoint(format!(
            "{}: body is {} bytes, expected {}",
            path.display(),
            body.len(),
            4 * per_blob * BLOBS.len()
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for p in [&mut m.params, &mut m.ema_params, &mut m.opt.m, &mut m.opt.v] {
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v = values.next().unwrap();
            }
        }
    }
    m.model_id = header.model_id;
    m.lineage = header.lineage;
    m.opt.t = header.timestep;
    m.rng_stream = header.rng_stream;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model(widths: Vec<usize>, seed: u64) -> Embedder {
        Embedder::init(Arch::new(widths).unwrap(), HyperParams::default(), seed).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_ema() {
        let m = model(vec![8, 16, 8], 1);
        assert_eq!(m.params.layers.len(), 2);
        assert_eq!(m.params.layers[0].weight.shape(), &[16, 8]);
        assert_eq!(m.params.layers[1].weight.shape(), &[8, 16]);
        assert_eq!(m.params.classifier.shape(), &[1, 8]);
        assert_eq!(m.ema_params, m.params);
        assert_eq!(m.opt.t, 0);
        assert_eq!(model(vec![8, 16, 8], 1), m);
        assert!(Arch::new(vec![8, 0, 4]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut m = model(vec![4, 6, 3], 2);
        m.params.scale(0.0);
        let f = m.forward_features(batch(5, 4, 0).view(), false).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_and_ema_equivalence() {
        let m = model(vec![4, 6, 3], 3);
        let x = batch(1, 4, 1);
        let xx = ndarray::concatenate![Axis(0), x, x];
        let f = m.forward_features(xx.view(), false).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f, m.forward_features(xx.view(), true).unwrap());
        assert!(m.forward_features(batch(2, 5, 0).view(), false).is_err());
    }

    #[test]
    fn confidence_rows() {
        let mut m = model(vec![4, 6, 3], 4);
        m.resize_classifier(5, 1).unwrap();
        let x = batch(7, 4, 2);
        let p = m.forward_confidence(x.view(), false).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        m.params.classifier.fill(0.0);
        let p = m.forward_confidence(x.view(), false).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));

        let s = array![[1.0, 2.0, 3.0]];
        let shifted = &s + 7.5;
        let (a, b) = (softmax_rows(&s), softmax_rows(&shifted));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn resize_isolates_body() {
        let mut m = model(vec![4, 6, 3], 5);
        let body = m.params.layers.clone();
        m.resize_classifier(4, 11).unwrap();
        let head = m.params.classifier.clone();
        m.resize_classifier(4, 11).unwrap();
        assert_eq!(head, m.params.classifier);
        assert_eq!(body, m.params.layers);
        assert_eq!(m.ema_params.classifier, m.params.classifier);
        assert!(m.opt.m.classifier.iter().all(|&v| v == 0.0));
        m.resize_classifier(1, 0).unwrap();
        let p = m.forward_confidence(batch(3, 4, 0).view(), true).unwrap();
        assert!(p.iter().all(|&v| v == 1.0));
        assert!(m.resize_classifier(0, 0).is_err());
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut m = model(vec![2, 3, 2], 6);
        let before = m.params.clone();
        let zero = EmbedderParams::zeros_like(&m.params);
        m.adam_step(&zero, 0.1, 0.0).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(m.opt.t, 1);

        // single scalar: first bias-corrected step moves by lr * g / (|g| + eps)
        let mut m = model(vec![1, 1], 7);
        let w0 = m.params.layers[0].weight[[0, 0]];
        let mut g = EmbedderParams::zeros_like(&m.params);
        g.layers[0].weight[[0, 0]] = 1.0;
        m.adam_step(&g, 0.1, 0.0).unwrap();
        let delta = w0 - m.params.layers[0].weight[[0, 0]];
        assert!((delta - 0.1).abs() < 1e-7, "{delta}");
    }

    #[test]
    fn adam_weight_decay_and_rejection() {
        let mut m = model(vec![3, 2], 8);
        let norm = |p: &EmbedderParams| p.to_flat().iter().map(|v| v * v).sum::<f64>();
        let before = norm(&m.params);
        let zero = EmbedderParams::zeros_like(&m.params);
        m.adam_step(&zero, 0.1, 0.01).unwrap();
        assert!(norm(&m.params) < before);

        let mut bad = zero.clone();
        bad.layers[0].bias[0] = f64::NAN;
        let snapshot = m.params.clone();
        assert!(matches!(
            m.adam_step(&bad, 0.1, 0.0),
            Err(PegError::NonFinite(_))
        ));
        assert_eq!(m.params, snapshot);
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let mut m = model(vec![1, 1], 9);
        m.ema_params.layers[0].weight[[0, 0]] = 1.0;
        m.params.layers[0].weight[[0, 0]] = 0.0;
        let ema = m.ema_params.clone();
        m.ema_update(1.0).unwrap();
        assert_eq!(m.ema_params, ema);
        m.ema_update(0.999).unwrap();
        assert!((m.ema_params.layers[0].weight[[0, 0]] - 0.999).abs() < 1e-15);
        m.ema_update(0.0).unwrap();
        assert_eq!(m.ema_params, m.params);
        assert!(m.ema_update(1.5).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = model(vec![2, 3, 2], 10);
        let z = Array2::zeros((1, 2));
        let zs = Array2::zeros((1, 1));
        assert!(matches!(
            m.backward(z.view(), zs.view()),
            Err(PegError::NoCachedForward)
        ));
        m.forward_train(batch(1, 2, 0).view()).unwrap();
        let g = m.backward(z.view(), zs.view()).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(m.backward(z.view(), zs.view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(vec![4, 5, 3], 12).with_id(42);
        m.resize_classifier(6, 2).unwrap();
        m.lineage = Some(7);
        m.forward_train(batch(4, 4, 3).view()).unwrap();
        let d_f = Array2::ones((4, 3));
        let d_s = Array2::ones((4, 6));
        let g = m.backward(d_f.view(), d_s.view()).unwrap();
        m.adam_step(&g, 0.01, 5e-4).unwrap();
        m.ema_update(0.9).unwrap();
        m.quantize_f32();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&m, &p).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), m);
    }
}

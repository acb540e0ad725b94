//! The evolutionary loop: cooperative selection, reproduction with
//! hyper-parameter mutation, and population mutual learning on shared
//! pseudo-labels, with per-generation checkpoints.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan, k_reciprocal_jaccard, kmeans_full_batch};
use crate::dataset::{corrupt_labels, FeatureDataset, Split};
use crate::embedder::{read_checkpoint, write_checkpoint, Arch, Embedder, HyperParams};
use crate::error::{PegError, Result};
use crate::game::{
    brd_select, ensemble_features, l2_normalize_rows, BrdOutcome, CrsUtility, TraceEntry, Utility, UtilityCache,
};
use crate::metrics::{crs, label_accuracy, map_cmc, CrsConfig, Retrieval, Tags};
use crate::objectives::{sample_pk_batch_with, TeacherSnapshot};
use crate::seed;
use crate::train::{fit_pseudo_labels, gather, snapshot, train_step, FitConfig, Jitter};

/// Density clustering settings for shared pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_samples: usize,
    pub k1: usize,
    pub k2: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            eps: 0.6,
            min_samples: 4,
            k1: 6,
            k2: 30,
        }
    }
}

/// How survivors are chosen each generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Best-response dynamics on the CRS of the selected ensemble.
    #[default]
    Game,
    /// The `L` members with the highest individual CRS.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Agents in the selection game.
    pub l: usize,
    /// Clones per survivor.
    pub h: usize,
    /// Mutation factor.
    pub r: f64,
    pub generations: usize,
    pub pml_epochs: usize,
    /// Models updated per batch.
    pub s: usize,
    pub alpha: f64,
    pub p: usize,
    pub k: usize,
    /// Batches per epoch; defaults to one pass over the clustered samples.
    pub iters_per_epoch: Option<usize>,
    pub cluster: ClusterParams,
    /// Augmentation of each model's view of a batch.
    pub jitter: Jitter,
    pub crs: CrsConfig,
    pub select: bool,
    pub selection: SelectionMode,
    pub reproduce: bool,
    pub mutual: bool,
    /// Safety budget of agent turns; defaults to `10 * L * K`.
    pub max_turns: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            l: 3,
            h: 3,
            r: 0.5,
            generations: 3,
            pml_epochs: 5,
            s: 3,
            alpha: 0.999,
            p: 4,
            k: 4,
            iters_per_epoch: None,
            cluster: ClusterParams::default(),
            jitter: Jitter::default(),
            crs: CrsConfig::for_inputs(32, 20),
            select: true,
            selection: SelectionMode::Game,
            reproduce: true,
            mutual: true,
            max_turns: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PegError::Config(m.into()));
        if self.l == 0 {
            return bad("L must be >= 1");
        }
        if !(0.0..1.0).contains(&self.r) {
            return bad("mutation factor must lie in [0, 1)");
        }
        if self.s == 0 || self.p == 0 || self.k < 2 {
            return bad("S, P must be >= 1 and K >= 2");
        }
        if self.reproduce && self.s > self.l * (self.h + 1) {
            return bad("S exceeds the population size after reproduction");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.cluster.eps > 0.0) || self.cluster.min_samples == 0 || self.cluster.k1 == 0 {
            return bad("clustering needs eps > 0, min_samples >= 1, k1 >= 1");
        }
        self.jitter.validate()?;
        self.crs.validate()
    }
}

/// A member removed by selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedModel {
    pub model_id: u64,
    pub lineage: Option<u64>,
    pub hyper: HyperParams,
    pub generation: usize,
}

/// Outcome of one pseudo-labelling epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub num_clusters: usize,
    pub outliers: usize,
    pub labels_hash: u64,
    pub iters: usize,
    pub mean_loss: f64,
    /// Purity of the pseudo-labels when ground truth is supplied.
    pub label_accuracy: Option<f64>,
}

/// Evaluation of one member at the end of a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub model_id: u64,
    pub lineage: Option<u64>,
    pub hyper: HyperParams,
    pub crs: Option<f64>,
    pub retrieval: Option<Retrieval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub selected: Vec<u64>,
    pub selection_utility: Option<f64>,
    pub selection_converged: bool,
    pub selection_turns: usize,
    pub selection_trace: Vec<TraceEntry>,
    pub epochs: Vec<EpochRecord>,
    pub members: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<Embedder>,
    /// Generations completed.
    pub generation: usize,
    pub next_id: u64,
    pub archive: Vec<ArchivedModel>,
    pub history: Vec<GenerationRecord>,
}

impl Population {
    /// Assigns ids `0..n` in order.
    pub fn new(members: Vec<Embedder>) -> Result<Self> {
        if members.is_empty() {
            return Err(PegError::Config("population needs at least one model".into()));
        }
        let members: Vec<Embedder> = members
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.with_id(i as u64))
            .collect();
        Ok(Self {
            next_id: members.len() as u64,
            members,
            generation: 0,
            archive: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.model_id).collect()
    }

    fn quantize(&mut self) {
        self.members.iter_mut().for_each(Embedder::quantize_f32);
    }
}

/// Whether two members share a direct parent/child or sibling relation.
pub fn related(a: &Embedder, b: &Embedder) -> bool {
    a.lineage == Some(b.model_id) || b.lineage == Some(a.model_id) || (a.lineage.is_some() && a.lineage == b.lineage)
}

/// Keeps the members at the sorted indices `subset`; the rest are archived.
pub fn retain(pop: &mut Population, subset: &[usize]) {
    let keep: Vec<bool> = (0..pop.len()).map(|i| subset.binary_search(&i).is_ok()).collect();
    let generation = pop.generation;
    let members = std::mem::take(&mut pop.members);
    for (m, kept) in members.into_iter().zip(keep) {
        if kept {
            pop.members.push(m);
        } else {
            pop.archive.push(ArchivedModel {
                model_id: m.model_id,
                lineage: m.lineage,
                hyper: m.hyper,
                generation,
            });
        }
    }
}

/// The `l` indices with the highest individual utility (ties to the lower
/// index), sorted ascending.
pub fn top_individuals(k: usize, l: usize, utility: &dyn Utility, cache: &UtilityCache) -> Result<Vec<usize>> {
    let keys: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    let values = cache.get_many(&keys, utility)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top = order[..l.min(k)].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Chooses survivors with `utility` according to `cfg.selection` and
/// archives the rest. Individual selection reports the ensemble utility of
/// its pick and an empty trace.
pub fn select_with(pop: &mut Population, utility: &dyn Utility, cfg: &GenerationConfig, seed: u64) -> Result<BrdOutcome> {
    if pop.is_empty() {
        return Err(PegError::Config("cannot select from an empty population".into()));
    }
    let cache = UtilityCache::new();
    let outcome = match cfg.selection {
        SelectionMode::Game => brd_select(pop.len(), cfg.l, utility, &cache, cfg.max_turns, seed)?,
        SelectionMode::Individual => {
            let subset = top_individuals(pop.len(), cfg.l, utility, &cache)?;
            let value = cache.get(&subset, utility)?;
            let action = crate::game::JointAction::new(subset.clone(), pop.len())?;
            BrdOutcome {
                action: action.clone(),
                subset,
                utility: value,
                initial: action,
                initial_utility: value,
                trace: Vec::new(),
                converged: true,
            }
        }
    };
    retain(pop, &outcome.subset);
    Ok(outcome)
}

/// Selection with the CRS of ensemble features as team utility.
pub fn select(pop: &mut Population, inputs: ArrayView2<f64>, cfg: &GenerationConfig, seed: u64) -> Result<BrdOutcome> {
    let utility = CrsUtility::new(&pop.members, inputs, &cfg.crs, true)?;
    select_with(pop, &utility, cfg, seed)
}

/// Draws each hyper-parameter uniformly in `[(1-r) v, (1+r) v]`.
pub fn mutate(hyper: &HyperParams, r: f64, rng: &mut seed::Rng) -> HyperParams {
    let v = hyper.to_array().map(|x| {
        let (lo, hi) = ((1.0 - r) * x, (1.0 + r) * x);
        if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            x
        }
    });
    let mut out = HyperParams::from_array(v);
    // smoothing must keep some mass on the target
    out.eps = out.eps.min(0.99);
    out
}

/// Each survivor is followed by `H` clones with fresh ids and mutated
/// hyper-parameters.
pub fn reproduce_mutate(pop: &mut Population, cfg: &GenerationConfig, seed: u64) {
    let mut rng = seed::rng(seed);
    let survivors = std::mem::take(&mut pop.members);
    for parent in survivors {
        let clones: Vec<Embedder> = (0..cfg.h)
            .map(|_| {
                let id = pop.next_id;
                pop.next_id += 1;
                let mut c = parent.clone_as(id, seed::derive_seed(seed, &[id]));
                c.hyper = mutate(&parent.hyper, cfg.r, &mut rng);
                c
            })
            .collect();
        pop.members.push(parent);
        pop.members.extend(clones);
    }
}

fn hash_labels(labels: &[i32]) -> u64 {
    let mut h = DefaultHasher::new();
    labels.hash(&mut h);
    h.finish()
}

/// Shared pseudo-labels from the EMA ensemble of all members.
pub fn pseudo_labels(members: &[Embedder], inputs: ArrayView2<f64>, params: &ClusterParams) -> Result<Vec<i32>> {
    let refs: Vec<&Embedder> = members.iter().collect();
    let features = ensemble_features(&refs, inputs, true)?;
    let dist = k_reciprocal_jaccard(features.view(), params.k1, params.k2)?;
    let assignment = dbscan(&dist, params.eps, params.min_samples)?;
    if assignment.num_clusters < 2 {
        return Err(PegError::Clustering(format!(
            "density clustering found {} clusters ({} outliers); eps {} is likely misconfigured",
            assignment.num_clusters,
            assignment.num_outliers(),
            params.eps
        )));
    }
    Ok(assignment.labels)
}

/// Classifier rows set to the normalised per-cluster mean features.
fn centroid_head(model: &Embedder, inputs: ArrayView2<f64>, labels: &[i32], m: usize) -> Result<Array2<f64>> {
    let features = model.forward_features(inputs, true)?;
    let mut head = Array2::<f64>::zeros((m, features.ncols()));
    for (row, &l) in features.rows().into_iter().zip(labels) {
        if l >= 0 {
            let mut h = head.row_mut(l as usize);
            h += &row;
        }
    }
    Ok(l2_normalize_rows(head))
}

/// Population mutual learning for `cfg.pml_epochs` epochs. Pseudo-labels
/// are fixed within an epoch; in every batch `S` sampled members are
/// updated against the EMA outputs of the other sampled members they are
/// not related to. Each sampled member sees its own jittered view of the
/// batch, both as student and as teacher.
pub fn pml(
    pop: &mut Population,
    inputs: ArrayView2<f64>,
    cfg: &GenerationConfig,
    seed: u64,
    gt: Option<&[i32]>,
) -> Result<Vec<EpochRecord>> {
    if pop.is_empty() {
        return Err(PegError::Config("empty population".into()));
    }
    let mut records = Vec::with_capacity(cfg.pml_epochs);
    for epoch in 0..cfg.pml_epochs {
        let labels = pseudo_labels(&pop.members, inputs, &cfg.cluster)?;
        let labels_hash = hash_labels(&labels);
        let m = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let heads = pop
            .members
            .par_iter()
            .map(|model| centroid_head(model, inputs, &labels, m))
            .collect::<Result<Vec<_>>>()?;
        for (model, head) in pop.members.iter_mut().zip(heads) {
            model.set_classifier(head)?;
        }
        let clustered = labels.iter().filter(|&&l| l >= 0).count();
        let iters = cfg.iters_per_epoch.unwrap_or(clustered.div_ceil(cfg.p * cfg.k)).max(1);
        let s = cfg.s.min(pop.len());
        let p = cfg.p.min(m);
        let mut rng = seed::derived_rng(seed, &[epoch as u64]);
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..iters {
            let pk = sample_pk_batch_with(&labels, p, cfg.k, &mut rng)?;
            let mut sampled = index::sample(&mut rng, pop.len(), s).into_vec();
            sampled.sort_unstable();
            let batch = gather(inputs, &pk.indices);
            let views: Vec<Array2<f64>> = sampled
                .par_iter()
                .map(|&i| cfg.jitter.view_for(&pop.members[i], batch.view()))
                .collect();
            let snapshots: Vec<TeacherSnapshot> = if cfg.mutual && s > 1 {
                sampled
                    .par_iter()
                    .zip(&views)
                    .map(|(&i, view)| snapshot(&pop.members[i], view.view()))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let teacher_sets: Vec<Vec<TeacherSnapshot>> = sampled
                .iter()
                .map(|&i| {
                    let me = &pop.members[i];
                    sampled
                        .iter()
                        .zip(&snapshots)
                        .filter(|&(&j, _)| j != i && !related(me, &pop.members[j]))
                        .map(|(_, snap)| snap.clone())
                        .collect()
                })
                .collect();
            let losses = pop
                .members
                .par_iter_mut()
                .enumerate()
                .filter_map(|(i, model)| sampled.binary_search(&i).ok().map(|slot| (slot, model)))
                .map(|(slot, model)| train_step(model, views[slot].view(), &pk.labels, &teacher_sets[slot], cfg.alpha).map(|r| r.loss))
                .collect::<Result<Vec<f64>>>()?;
            total += losses.iter().sum::<f64>();
            steps += losses.len();
        }
        debug_assert_eq!(hash_labels(&labels), labels_hash);
        let outliers = labels.len() - clustered;
        log::info!(
            "epoch {epoch}: {m} clusters, {outliers} outliers, mean loss {:.4}",
            total / steps as f64
        );
        records.push(EpochRecord {
            epoch,
            num_clusters: m,
            outliers,
            labels_hash,
            iters,
            mean_loss: total / steps as f64,
            label_accuracy: gt.map(|ids| label_accuracy(&labels, ids)).transpose()?,
        });
    }
    Ok(records)
}

/// Query/gallery split with ground truth, for supervised reference numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub inputs: Array2<f64>,
    pub ids: Vec<i32>,
    pub cameras: Vec<i32>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl EvalSet {
    pub fn from_dataset(ds: &FeatureDataset) -> Result<Self> {
        let query = ds.indices_of(Split::Query);
        let gallery = ds.indices_of(Split::Gallery);
        if query.is_empty() || gallery.is_empty() {
            return Err(PegError::Split("dataset has no query/gallery split".into()));
        }
        Ok(Self {
            inputs: ds.inputs(),
            ids: ds.ids.clone(),
            cameras: ds.cameras.clone(),
            query,
            gallery,
        })
    }

    /// Retrieval accuracy of arbitrary per-row features.
    pub fn retrieval_of(&self, features: ArrayView2<f64>) -> Result<Retrieval> {
        let pick = |idx: &[usize]| -> (Array2<f64>, Vec<i32>, Vec<i32>) {
            (
                gather(features, idx),
                idx.iter().map(|&i| self.ids[i]).collect(),
                idx.iter().map(|&i| self.cameras[i]).collect(),
            )
        };
        let (qf, qi, qc) = pick(&self.query);
        let (gf, gi, gc) = pick(&self.gallery);
        map_cmc(
            qf.view(),
            gf.view(),
            Tags { ids: &qi, cameras: &qc },
            Tags { ids: &gi, cameras: &gc },
        )
    }

    /// Retrieval accuracy of a model's normalised EMA features.
    pub fn retrieval(&self, model: &Embedder) -> Result<Retrieval> {
        let f = l2_normalize_rows(model.forward_features(self.inputs.view(), true)?);
        self.retrieval_of(f.view())
    }
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PegOutcome {
    pub population: Population,
    /// Index into `population.members` of the model chosen for inference.
    pub final_index: usize,
    pub final_crs: f64,
    pub final_retrieval: Option<Retrieval>,
}

impl PegOutcome {
    pub fn final_model(&self) -> &Embedder {
        &self.population.members[self.final_index]
    }
}

/// Where and whether a run writes generation checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub eval: Option<&'a EvalSet>,
    /// Record the CRS of every member after each generation.
    pub member_crs: bool,
}

fn member_records(pop: &Population, inputs: ArrayView2<f64>, cfg: &GenerationConfig, opts: &RunOptions<'_>) -> Result<Vec<MemberRecord>> {
    pop.members
        .par_iter()
        .map(|m| {
            let crs_value = if opts.member_crs {
                let f = l2_normalize_rows(m.forward_features(inputs, true)?);
                Some(crs(f.view(), inputs, &cfg.crs)?)
            } else {
                None
            };
            let retrieval = opts.eval.map(|e| e.retrieval(m)).transpose()?;
            Ok(MemberRecord {
                model_id: m.model_id,
                lineage: m.lineage,
                hyper: m.hyper,
                crs: crs_value,
                retrieval,
            })
        })
        .collect()
}

/// Runs the remaining generations of `pop` (resuming at `pop.generation`),
/// then picks one model with a single-agent game.
pub fn run_peg(mut pop: Population, inputs: ArrayView2<f64>, cfg: &GenerationConfig, seed: u64, opts: &RunOptions<'_>) -> Result<PegOutcome> {
    cfg.validate()?;
    for g in pop.generation..cfg.generations {
        let gseed = seed::derive_seed(seed, &[g as u64]);
        let (selected, selection_utility, converged, trace) = if cfg.select {
            let out = select(&mut pop, inputs, cfg, seed::derive_seed(gseed, &[0]))?;
            (pop.ids(), Some(out.utility), out.converged, out.trace)
        } else {
            (pop.ids(), None, true, Vec::new())
        };
        if cfg.reproduce {
            reproduce_mutate(&mut pop, cfg, seed::derive_seed(gseed, &[1]));
        }
        let gt = opts.eval.map(|e| e.ids.as_slice());
        let epochs = pml(&mut pop, inputs, cfg, seed::derive_seed(gseed, &[2]), gt)?;
        pop.quantize();
        pop.generation = g + 1;
        let members = member_records(&pop, inputs, cfg, opts)?;
        pop.history.push(GenerationRecord {
            generation: g,
            selected,
            selection_utility,
            selection_converged: converged,
            selection_turns: trace.len(),
            selection_trace: trace,
            epochs,
            members,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            save_population(&pop, cfg, seed, dir.join(format!("gen-{}", g + 1)))?;
        }
    }
    let utility = CrsUtility::new(&pop.members, inputs, &cfg.crs, true)?;
    let cache = UtilityCache::new();
    let choice = brd_select(pop.len(), 1, &utility, &cache, cfg.max_turns, seed::derive_seed(seed, &[u64::MAX]))?;
    let final_index = choice.subset[0];
    let final_retrieval = opts.eval.map(|e| e.retrieval(&pop.members[final_index])).transpose()?;
    Ok(PegOutcome {
        population: pop,
        final_index,
        final_crs: choice.utility,
        final_retrieval,
    })
}

/// Settings of the pre-training stand-in: a short fit on k-means labels of
/// the raw inputs, optionally corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub iters: usize,
    pub clusters: usize,
    pub p: usize,
    pub k: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            clusters: 20,
            p: 8,
            k: 4,
        }
    }
}

/// One initial member: architecture and warm-up label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    #[serde(default)]
    pub warmup_noise: f64,
}

/// Builds the initial population. With a warm-up each model is fitted to
/// its own k-means labelling of the inputs (own seed, own noise level) and
/// its EMA copy reset to the result.
pub fn init_population(
    specs: &[ModelSpec],
    hyper: HyperParams,
    inputs: ArrayView2<f64>,
    warmup: Option<&WarmupConfig>,
    seed: u64,
) -> Result<Population> {
    let members = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mseed = seed::derive_seed(seed, &[i as u64]);
            let mut model = Embedder::init(spec.arch.clone(), hyper, mseed)?;
            if let Some(w) = warmup {
                let km_seed = seed::derive_seed(mseed, &[1]);
                let labels = kmeans_full_batch(inputs, w.clusters, km_seed, 50)?.0.labels;
                let labels = if spec.warmup_noise > 0.0 {
                    corrupt_labels(&labels, spec.warmup_noise, w.clusters, seed::derive_seed(mseed, &[2]))?
                } else {
                    labels
                };
                let fit = FitConfig {
                    iters: w.iters,
                    p: w.p,
                    k: w.k,
                    alpha: 0.0,
                    seed: seed::derive_seed(mseed, &[3]),
                };
                fit_pseudo_labels(&mut model, inputs, &labels, &fit)?;
                model.opt = crate::embedder::AdamState {
                    m: crate::embedder::EmbedderParams::zeros_like(&model.params),
                    v: crate::embedder::EmbedderParams::zeros_like(&model.params),
                    t: 0,
                };
            }
            model.ema_params = model.params.clone();
            model.quantize_f32();
            Ok(model)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(members)
}

/// Generation checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generation: usize,
    pub seed: u64,
    pub config: GenerationConfig,
    pub next_id: u64,
    pub members: Vec<ManifestMember>,
    pub archive: Vec<ArchivedModel>,
    pub history: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub model_id: u64,
    pub lineage: Option<u64>,
    pub file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every member plus a manifest into `dir`, replacing it atomically
/// so an interrupted write never clobbers an earlier checkpoint.
pub fn save_population(pop: &Population, cfg: &GenerationConfig, seed: u64, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| PegError::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| PegError::io(&tmp, e))?;
    let mut members = Vec::with_capacity(pop.len());
    for m in &pop.members {
        let file = format!("model-{}.ckpt", m.model_id);
        write_checkpoint(m, tmp.join(&file))?;
        members.push(ManifestMember {
            model_id: m.model_id,
            lineage: m.lineage,
            file,
        });
    }
    let manifest = Manifest {
        generation: pop.generation,
        seed,
        config: cfg.clone(),
        next_id: pop.next_id,
        members,
        archive: pop.archive.clone(),
        history: pop.history.clone(),
    };
    let path = tmp.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| PegError::io(&path, e))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| PegError::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| PegError::io(dir, e))
}

/// Reads a checkpoint directory back into a population.
pub fn load_population(dir: impl AsRef<Path>) -> Result<(Population, Manifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| PegError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let members = manifest
        .members
        .iter()
        .map(|m| {
            let model = read_checkpoint(dir.join(&m.file))?;
            if model.model_id != m.model_id {
                return Err(PegError::Checkpoint(format!("{} holds model {}", m.file, model.model_id)));
            }
            Ok(model)
        })
        .collect::<Result<Vec<_>>>()?;
    let pop = Population {
        members,
        generation: manifest.generation,
        next_id: manifest.next_id,
        archive: manifest.archive.clone(),
        history: manifest.history.clone(),
    };
    Ok((pop, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};
    use crate::game::TableUtility;

    fn tiny_pop(n: usize) -> Population {
        let arch = Arch::new(vec![4, 6, 3]).unwrap();
        Population::new(
            (0..n)
                .map(|i| Embedder::init(arch.clone(), HyperParams::default(), i as u64).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn size_and_mutation_laws() {
        let mut pop = tiny_pop(3);
        let base = HyperParams {
            lr: 3.5e-4,
            ..HyperParams::default()
        };
        pop.members.iter_mut().for_each(|m| m.hyper = base);
        let cfg = GenerationConfig::default();
        reproduce_mutate(&mut pop, &cfg, 5);
        assert_eq!(pop.len(), 12);
        let ids = pop.ids();
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 12);
        for family in pop.members.chunks(4) {
            assert_eq!(family[0].hyper, base);
            for clone in &family[1..] {
                assert_eq!(clone.lineage, Some(family[0].model_id));
                assert_eq!(clone.params, family[0].params);
                assert_eq!(clone.opt, family[0].opt);
                assert!((1.75e-4..=5.25e-4).contains(&clone.hyper.lr));
                for (v, p) in clone.hyper.to_array().iter().zip(base.to_array()) {
                    assert!(*v >= 0.5 * p && *v <= 1.5 * p);
                }
            }
        }
    }

    #[test]
    fn degenerate_reproduction() {
        let mut pop = tiny_pop(2);
        reproduce_mutate(&mut pop, &GenerationConfig { h: 0, ..Default::default() }, 1);
        assert_eq!(pop.len(), 2);
        let mut pop = tiny_pop(1);
        reproduce_mutate(&mut pop, &GenerationConfig { h: 2, r: 0.0, ..Default::default() }, 1);
        assert!(pop.members.iter().all(|m| m.hyper == pop.members[0].hyper));
    }

    #[test]
    fn lineage_rule() {
        let mut pop = tiny_pop(2);
        reproduce_mutate(&mut pop, &GenerationConfig { h: 2, ..Default::default() }, 3);
        let m = &pop.members;
        assert!(related(&m[0], &m[1]));
        assert!(related(&m[1], &m[2]));
        assert!(!related(&m[0], &m[3]));
        assert!(!related(&m[2], &m[4]));
        assert!(!related(&tiny_pop(2).members[0], &tiny_pop(2).members[1]));
    }

    #[test]
    fn selection_delegates_to_game() {
        let table = TableUtility::new([
            (vec![0], 1.0),
            (vec![1], 2.0),
            (vec![2], 3.0),
            (vec![0, 1], 4.0),
            (vec![0, 2], 2.5),
            (vec![1, 2], 5.0),
        ]);
        let mut pop = tiny_pop(3);
        let cfg = GenerationConfig { l: 2, ..Default::default() };
        let out = select_with(&mut pop, &table, &cfg, 0).unwrap();
        assert_eq!(out.subset, vec![1, 2]);
        assert_eq!(pop.ids(), vec![1, 2]);
        assert_eq!(pop.archive.len(), 1);
        assert_eq!(pop.archive[0].model_id, 0);

        let mut pop = tiny_pop(3);
        let individual = GenerationConfig {
            selection: SelectionMode::Individual,
            ..cfg.clone()
        };
        let out = select_with(&mut pop, &table, &individual, 0).unwrap();
        assert_eq!(out.subset, vec![1, 2]);
        let mut pop = tiny_pop(3);
        let lone = GenerationConfig { l: 1, ..individual };
        assert_eq!(select_with(&mut pop, &table, &lone, 0).unwrap().subset, vec![2]);

        let mut one = tiny_pop(1);
        let t1 = TableUtility::new([(vec![0], 1.0)]);
        select_with(&mut one, &t1, &cfg, 0).unwrap();
        assert_eq!(one.len(), 1);
    }

    fn small_data() -> Array2<f64> {
        generate_synthetic(&SynthSpec {
            num_identities: 6,
            samples_per_identity: 12,
            dim: 4,
            intra_std: 0.3,
            camera_shift: 0.2,
            ..SynthSpec::default()
        })
        .unwrap()
        .inputs()
    }

    fn pml_cfg() -> GenerationConfig {
        GenerationConfig {
            pml_epochs: 1,
            iters_per_epoch: Some(3),
            p: 2,
            k: 2,
            cluster: ClusterParams {
                eps: 0.7,
                min_samples: 3,
                k1: 5,
                k2: 10,
            },
            ..Default::default()
        }
    }

    #[test]
    fn pml_single_model_and_full_sampling() {
        let x = small_data();
        let mut pop = tiny_pop(1);
        let recs = pml(&mut pop, x.view(), &pml_cfg(), 1, None).unwrap();
        assert!(recs[0].num_clusters >= 2);

        let mut pop = tiny_pop(3);
        let before = pop.clone();
        pml(&mut pop, x.view(), &GenerationConfig { s: 3, ..pml_cfg() }, 2, None).unwrap();
        for (a, b) in pop.members.iter().zip(&before.members) {
            assert_eq!(a.opt.t, 3);
            assert_ne!(a.params.layers, b.params.layers);
        }
    }

    #[test]
    fn pml_rejects_single_cluster() {
        let x = small_data();
        let mut pop = tiny_pop(1);
        let cfg = GenerationConfig {
            cluster: ClusterParams {
                eps: 1.0,
                min_samples: 2,
                k1: 5,
                k2: 10,
            },
            ..pml_cfg()
        };
        assert!(matches!(pml(&mut pop, x.view(), &cfg, 1, None), Err(PegError::Clustering(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut pop = tiny_pop(2);
        reproduce_mutate(&mut pop, &GenerationConfig { h: 1, ..Default::default() }, 1);
        pop.quantize();
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerationConfig::default();
        save_population(&pop, &cfg, 9, dir.path().join("gen-1")).unwrap();
        let (back, manifest) = load_population(dir.path().join("gen-1")).unwrap();
        assert_eq!(back, pop);
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest.seed, 9);
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::default().validate().is_ok());
        assert!(GenerationConfig { r: 1.0, ..Default::default() }.validate().is_err());
        assert!(GenerationConfig { l: 0, ..Default::default() }.validate().is_err());
        assert!(GenerationConfig { s: 13, ..Default::default() }.validate().is_err());
    }
}

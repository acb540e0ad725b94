//! Experiment presets, flat result records and report emission.
//!
//! Every preset produces a [`Report`]: a list of flat [`Record`] rows plus
//! the raw selection traces. Reports are written as CSV, JSON lines and SVG
//! charts; the traces are always written as JSON lines next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::kmeans_full_batch;
use crate::dataset::{corrupt_labels, generate_synthetic, load_dataset, split_query_gallery, FeatureDataset, Split, SynthSpec};
use crate::embedder::{Arch, Embedder, HyperParams};
use crate::error::{PegError, Result};
use crate::evolution::{
    init_population, load_population, retain, run_peg, top_individuals, EvalSet, GenerationConfig, ModelSpec,
    PegOutcome, Population, RunOptions, SelectionMode, WarmupConfig, MANIFEST_FILE,
};
use crate::game::{brd_select, l2_normalize_rows, nash_check, CrsUtility, TableUtility, TraceEntry, Utility, UtilityCache};
use crate::metrics::{crs, dbi, ics, kendall_tau, label_accuracy, reference_scatter, silhouette, spearman_rho, CrsConfig, Retrieval};
use crate::seed;

pub const PRESETS: [&str; 5] = ["crs-validation", "peg", "selection-ablation", "brd-trace", "smoke"];

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl FromStr for Format {
    type Err = PegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(PegError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Parses a comma-separated format list such as `csv,json,svg`.
pub fn parse_formats(list: &str) -> Result<Vec<Format>> {
    let mut out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Format::from_str)
        .collect::<Result<Vec<_>>>()?;
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(PegError::Config("no report format requested".into()));
    }
    Ok(out)
}

/// Training pipelines compared by the `peg` preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Each initial model self-trained alone.
    Single,
    /// Shared ensemble pseudo-labels, every model trained independently.
    Multi,
    /// Shared pseudo-labels with mutual learning.
    MultiPml,
    /// One selection game, then mutual learning.
    MultiPmlSel,
    /// Selection, reproduction with mutation and mutual learning.
    Peg,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Single => "single",
            Arm::Multi => "multi",
            Arm::MultiPml => "multi-pml",
            Arm::MultiPmlSel => "multi-pml-sel",
            Arm::Peg => "peg",
        }
    }

    /// The arm's generation settings. Non-evolving arms run the whole
    /// epoch budget in one generation.
    pub fn config(self, base: &GenerationConfig, population: usize) -> GenerationConfig {
        let flat = GenerationConfig {
            generations: 1,
            pml_epochs: base.generations * base.pml_epochs,
            reproduce: false,
            ..base.clone()
        };
        match self {
            Arm::Single => GenerationConfig {
                select: false,
                mutual: false,
                s: 1,
                ..flat
            },
            Arm::Multi => GenerationConfig {
                select: false,
                mutual: false,
                s: population,
                ..flat
            },
            Arm::MultiPml => GenerationConfig {
                select: false,
                s: base.s.min(population),
                ..flat
            },
            Arm::MultiPmlSel => GenerationConfig {
                s: base.s.min(base.l),
                ..flat
            },
            Arm::Peg => base.clone(),
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub dataset: DatasetSource,
    /// Query share per identity when the dataset has no split yet.
    pub query_fraction: f64,
    pub models: Vec<ModelSpec>,
    pub hyper: HyperParams,
    pub warmup: Option<WarmupConfig>,
    pub generation: GenerationConfig,
    pub arms: Vec<Arm>,
    /// Label corruption levels of the ICS study.
    pub corruption_levels: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub formats: Vec<Format>,
}

fn specs(dim: usize, widths: &[&[usize]], noise: &[f64]) -> Vec<ModelSpec> {
    widths
        .iter()
        .zip(noise)
        .map(|(w, &n)| ModelSpec {
            arch: Arch {
                widths: std::iter::once(dim).chain(w.iter().copied()).collect(),
            },
            warmup_noise: n,
        })
        .collect()
}

// every member has a hidden layer, unlike the linear CRS reference
const POPULATION_WIDTHS: [&[usize]; 8] = [&[64, 32], &[32, 16], &[48, 24], &[24, 16], &[64, 64, 32], &[40, 16], &[128, 32], &[48, 32]];

const WARMUP_NOISE: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

impl ExperimentConfig {
    /// The default configuration of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let synth = SynthSpec {
            samples_per_identity: 50,
            intra_std: 1.0,
            camera_shift: 0.4,
            ..SynthSpec::default()
        };
        let dim = synth.dim;
        let mut generation = GenerationConfig {
            crs: CrsConfig::for_inputs(dim, synth.num_identities),
            alpha: 0.99,
            ..GenerationConfig::default()
        };
        generation.s = generation.l * (generation.h + 1);
        generation.cluster.k1 = 20;
        let mut cfg = Self {
            preset: name.to_owned(),
            dataset: DatasetSource::Synthetic(synth),
            query_fraction: 0.2,
            models: specs(dim, &POPULATION_WIDTHS, &WARMUP_NOISE),
            hyper: HyperParams::default(),
            warmup: Some(WarmupConfig::default()),
            generation,
            arms: vec![Arm::Single, Arm::Multi, Arm::MultiPml, Arm::MultiPmlSel, Arm::Peg],
            corruption_levels: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            seed: 0,
            out_dir: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json, Format::Svg],
        };
        match name {
            "peg" | "selection-ablation" | "brd-trace" | "crs-validation" => {}
            "smoke" => {
                let synth = SynthSpec {
                    num_identities: 6,
                    samples_per_identity: 12,
                    dim: 8,
                    ..SynthSpec::default()
                };
                cfg.dataset = DatasetSource::Synthetic(synth);
                cfg.query_fraction = 0.25;
                cfg.models = specs(8, &[&[12, 6], &[6], &[10, 6]], &[0.0, 0.2, 0.4]);
                cfg.warmup = Some(WarmupConfig {
                    iters: 20,
                    clusters: 6,
                    p: 4,
                    k: 3,
                });
                cfg.generation = GenerationConfig {
                    l: 2,
                    h: 1,
                    generations: 2,
                    pml_epochs: 1,
                    s: 2,
                    p: 3,
                    k: 3,
                    alpha: 0.9,
                    crs: CrsConfig {
                        ref_iters: 20,
                        ..CrsConfig::for_inputs(8, 6)
                    },
                    ..GenerationConfig::default()
                };
                cfg.generation.cluster.k1 = 4;
                cfg.generation.cluster.k2 = 8;
                cfg.generation.cluster.min_samples = 3;
                cfg.arms = vec![Arm::MultiPml, Arm::Peg];
                cfg.corruption_levels = vec![0.0, 0.5];
            }
            other => return Err(PegError::UnknownPreset(other.to_owned())),
        }
        Ok(cfg)
    }

    /// Reads and validates a JSON config file. Unreadable or malformed
    /// files are configuration errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |e: &dyn std::fmt::Display| PegError::Config(format!("{}: {e}", path.display()));
        let bytes = fs::read(path).map_err(|e| bad(&e))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(PegError::UnknownPreset(self.preset.clone()));
        }
        if self.models.is_empty() {
            return Err(PegError::Config("at least one model is required".into()));
        }
        for m in &self.models {
            m.arch.validate()?;
            if !(0.0..=1.0).contains(&m.warmup_noise) {
                return Err(PegError::Config(format!("warm-up noise {} outside [0, 1]", m.warmup_noise)));
            }
        }
        if self.corruption_levels.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(PegError::Config("corruption levels must lie in [0, 1]".into()));
        }
        if self.formats.is_empty() {
            return Err(PegError::Config("no report format requested".into()));
        }
        self.hyper.validate()?;
        self.generation.validate()
    }

    /// Hex SHA-256 of the JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

/// One flat result row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub preset: String,
    /// Which table the row belongs to, e.g. `member` or `correlation`.
    pub kind: String,
    pub arm: Option<String>,
    pub generation: Option<usize>,
    pub step: Option<usize>,
    pub model_id: Option<u64>,
    pub corruption: Option<f64>,
    pub label_accuracy: Option<f64>,
    pub crs: Option<f64>,
    pub ics: Option<f64>,
    pub dbi: Option<f64>,
    pub sc: Option<f64>,
    pub map: Option<f64>,
    pub cmc1: Option<f64>,
    pub cmc5: Option<f64>,
    pub cmc10: Option<f64>,
    pub utility: Option<f64>,
    pub metric: Option<String>,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub note: Option<String>,
}

impl Record {
    fn with_retrieval(mut self, r: Option<&Retrieval>) -> Self {
        if let Some(r) = r {
            self.map = Some(r.map);
            self.cmc1 = Some(r.cmc1);
            self.cmc5 = Some(r.cmc5);
            self.cmc10 = Some(r.cmc10);
        }
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub records: Vec<Record>,
    /// Selection traces keyed by a file-safe name.
    pub traces: BTreeMap<String, Vec<TraceEntry>>,
}

impl Report {
    pub fn of_kind(&self, kind: &str) -> Vec<&Record> {
        self.records.iter().filter(|r| r.kind == kind).collect()
    }
}

/// Dataset, evaluation split and run identity shared by all presets.
pub struct Bench {
    pub dataset: FeatureDataset,
    pub eval: EvalSet,
    pub inputs: Array2<f64>,
    base: Record,
}

impl Bench {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = match &cfg.dataset {
            DatasetSource::Synthetic(spec) => generate_synthetic(&SynthSpec {
                seed: seed::derive_seed(cfg.seed, &[0, spec.seed]),
                ..spec.clone()
            })?,
            DatasetSource::Path(p) => load_dataset(p)?,
        };
        let ds = if ds.indices_of(Split::Query).is_empty() {
            split_query_gallery(&ds, cfg.query_fraction, seed::derive_seed(cfg.seed, &[1]))?
        } else {
            ds
        };
        let dim = ds.dim();
        let check = |what: &str, arch: &Arch| {
            if arch.input_dim() == dim {
                Ok(())
            } else {
                Err(PegError::Config(format!(
                    "{what} expects inputs of width {} but the dataset has {dim}",
                    arch.input_dim()
                )))
            }
        };
        for m in &cfg.models {
            check("a model", &m.arch)?;
        }
        check("the CRS reference model", &cfg.generation.crs.ref_arch)?;
        let hash = cfg.hash()?;
        let base = Record {
            run_id: format!("{}-s{}-{}", cfg.preset, cfg.seed, &hash[..8]),
            config_hash: hash,
            seed: cfg.seed,
            preset: cfg.preset.clone(),
            ..Record::default()
        };
        Ok(Self {
            eval: EvalSet::from_dataset(&ds)?,
            inputs: ds.inputs(),
            dataset: ds,
            base,
        })
    }

    fn record(&self, kind: &str) -> Record {
        Record {
            kind: kind.to_owned(),
            ..self.base.clone()
        }
    }

    fn population(&self, cfg: &ExperimentConfig) -> Result<Population> {
        init_population(
            &cfg.models,
            cfg.hyper,
            self.inputs.view(),
            cfg.warmup.as_ref(),
            seed::derive_seed(cfg.seed, &[2]),
        )
    }

    fn normalized(&self, model: &Embedder) -> Result<Array2<f64>> {
        Ok(l2_normalize_rows(model.forward_features(self.inputs.view(), true)?))
    }
}

/// Runs the preset named in `cfg`. With `resume`, evolution runs continue
/// from the newest checkpoint under `out_dir/checkpoints`.
pub fn run_preset(cfg: &ExperimentConfig, resume: bool) -> Result<Report> {
    let bench = Bench::prepare(cfg)?;
    log::info!("{}: {} samples, dim {}", bench.base.run_id, bench.dataset.len(), bench.dataset.dim());
    match cfg.preset.as_str() {
        "crs-validation" => crs_validation(cfg, &bench),
        "peg" | "smoke" => peg_arms(cfg, &bench, resume),
        "selection-ablation" => selection_ablation(cfg, &bench, resume),
        "brd-trace" => brd_trace(cfg, &bench),
        other => Err(PegError::UnknownPreset(other.to_owned())),
    }
}

/// Reference ICS under `labels`, for each corruption level of the true ids.
pub fn ics_noise_study(cfg: &ExperimentConfig, bench: &Bench) -> Result<Vec<Record>> {
    let ids = &bench.dataset.ids;
    let num_ids = bench.dataset.num_identities();
    cfg.corruption_levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let labels = corrupt_labels(ids, level, num_ids, seed::derive_seed(cfg.seed, &[3, i as u64]))?;
            let scatter = reference_scatter(bench.inputs.view(), &labels, &cfg.generation.crs)?;
            Ok(Record {
                corruption: Some(level),
                label_accuracy: Some(label_accuracy(&labels, ids)?),
                ics: Some(scatter.j),
                ..bench.record("ics-noise")
            })
        })
        .collect()
}

/// Raw scatter scores of a model's own k-means partition.
fn raw_scores(features: ArrayView2<f64>, m: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let labels = kmeans_full_batch(features, m, seed, 100)?.0.labels;
    Ok((ics(features, &labels)?.j, dbi(features, &labels)?, silhouette(features, &labels)?))
}

fn crs_validation(cfg: &ExperimentConfig, bench: &Bench) -> Result<Report> {
    let mut records = ics_noise_study(cfg, bench)?;
    let pop = bench.population(cfg)?;
    let single = Arm::Single.config(&cfg.generation, 1);
    let opts = RunOptions {
        eval: Some(&bench.eval),
        ..RunOptions::default()
    };
    let mut ranking = Vec::with_capacity(pop.len());
    for (i, model) in pop.members.iter().enumerate() {
        let features = bench.normalized(model)?;
        let crs_value = crs(features.view(), bench.inputs.view(), &cfg.generation.crs)?;
        let (ics_value, dbi_value, sc_value) =
            raw_scores(features.view(), cfg.generation.crs.m, seed::derive_seed(cfg.seed, &[4, i as u64]))?;
        let solo = Population::new(vec![model.clone()])?;
        let (after, note) = match run_peg(solo, bench.inputs.view(), &single, seed::derive_seed(cfg.seed, &[5, i as u64]), &opts) {
            Ok(out) => (out.final_retrieval, None),
            Err(PegError::Clustering(msg)) => {
                log::warn!("model {i}: self-training stopped: {msg}");
                (Some(bench.eval.retrieval(model)?), Some("untrained".to_owned()))
            }
            Err(e) => return Err(e),
        };
        ranking.push(
            Record {
                model_id: Some(model.model_id),
                corruption: Some(cfg.models[i].warmup_noise),
                crs: Some(crs_value),
                ics: Some(ics_value),
                dbi: Some(dbi_value),
                sc: Some(sc_value),
                note,
                ..bench.record("ranking")
            }
            .with_retrieval(after.as_ref()),
        );
    }
    let map: Vec<f64> = ranking.iter().map(|r| r.map.unwrap_or(f64::NAN)).collect();
    let pick = |f: fn(&Record) -> Option<f64>| -> Vec<f64> { ranking.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect() };
    // lower DBI is better, so it enters negated
    let scores = [
        ("crs", pick(|r| r.crs)),
        ("ics", pick(|r| r.ics)),
        ("dbi", pick(|r| r.dbi.map(|d| -d))),
        ("sc", pick(|r| r.sc)),
    ];
    let mut correlations = Vec::new();
    for (name, values) in scores {
        let (rho, tau, note) = match (spearman_rho(&values, &map), kendall_tau(&values, &map)) {
            (Ok(r), Ok(t)) => (Some(r), Some(t), None),
            (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
        };
        correlations.push(Record {
            metric: Some(name.to_owned()),
            rho,
            tau,
            note,
            ..bench.record("correlation")
        });
    }
    records.extend(ranking);
    records.extend(correlations);
    Ok(Report {
        records,
        traces: BTreeMap::new(),
    })
}

/// Latest `gen-N` checkpoint directory below `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| PegError::io(dir, e))? {
        let path = entry.map_err(|e| PegError::io(dir, e))?.path();
        let gen = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("gen-"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(g) = gen {
            if path.join(MANIFEST_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| g > *b) {
                best = Some((g, path));
            }
        }
    }
    Ok(best)
}

/// Runs one evolution, optionally continuing from its latest checkpoint.
fn evolve(
    name: &str,
    start: Population,
    gcfg: &GenerationConfig,
    seed: u64,
    cfg: &ExperimentConfig,
    bench: &Bench,
    resume: bool,
) -> Result<PegOutcome> {
    let dir = cfg.out_dir.join("checkpoints").join(name);
    let pop = match resume.then(|| latest_checkpoint(&dir)).transpose()?.flatten() {
        Some((g, path)) => {
            let (pop, manifest) = load_population(&path)?;
            if manifest.seed != seed || &manifest.config != gcfg {
                return Err(PegError::Checkpoint(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            log::info!("{name}: resuming after generation {g}");
            pop
        }
        None => start,
    };
    let opts = RunOptions {
        checkpoint_dir: Some(dir),
        eval: Some(&bench.eval),
        member_crs: true,
    };
    run_peg(pop, bench.inputs.view(), gcfg, seed, &opts)
}

fn outcome_records(bench: &Bench, arm: &str, out: &PegOutcome, report: &mut Report) {
    for h in &out.population.history {
        let arm_s = Some(arm.to_owned());
        if let Some(u) = h.selection_utility {
            report.records.push(Record {
                arm: arm_s.clone(),
                generation: Some(h.generation),
                utility: Some(u),
                step: Some(h.selection_turns),
                note: Some(join_ids(&h.selected)),
                ..bench.record("selection")
            });
        }
        if !h.selection_trace.is_empty() {
            report.traces.insert(format!("{arm}-gen{}", h.generation), h.selection_trace.clone());
        }
        for e in &h.epochs {
            report.records.push(Record {
                arm: arm_s.clone(),
                generation: Some(h.generation),
                step: Some(e.epoch),
                label_accuracy: e.label_accuracy,
                utility: Some(e.mean_loss),
                metric: Some("loss".to_owned()),
                note: Some(format!("{} clusters, {} outliers", e.num_clusters, e.outliers)),
                ..bench.record("epoch")
            });
        }
        for m in &h.members {
            report.records.push(
                Record {
                    arm: arm_s.clone(),
                    generation: Some(h.generation),
                    model_id: Some(m.model_id),
                    crs: m.crs,
                    note: m.lineage.map(|l| format!("child of {l}")),
                    ..bench.record("member")
                }
                .with_retrieval(m.retrieval.as_ref()),
            );
        }
    }
    report.records.push(
        Record {
            arm: Some(arm.to_owned()),
            model_id: Some(out.final_model().model_id),
            crs: Some(out.final_crs),
            ..bench.record("final")
        }
        .with_retrieval(out.final_retrieval.as_ref()),
    );
}

fn join_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

fn initial_records(bench: &Bench, cfg: &ExperimentConfig, pop: &Population) -> Result<Vec<Record>> {
    pop.members
        .iter()
        .map(|m| {
            let features = bench.normalized(m)?;
            Ok(Record {
                model_id: Some(m.model_id),
                crs: Some(crs(features.view(), bench.inputs.view(), &cfg.generation.crs)?),
                note: Some(format!("{:?}", m.arch.widths)),
                ..bench.record("initial")
            }
            .with_retrieval(Some(&bench.eval.retrieval_of(features.view())?)))
        })
        .collect()
}

fn peg_arms(cfg: &ExperimentConfig, bench: &Bench, resume: bool) -> Result<Report> {
    let pop = bench.population(cfg)?;
    let mut report = Report {
        records: initial_records(bench, cfg, &pop)?,
        traces: BTreeMap::new(),
    };
    if cfg.generation.generations == 0 {
        return Ok(report);
    }
    let seed = seed::derive_seed(cfg.seed, &[6]);
    for &arm in &cfg.arms {
        let gcfg = arm.config(&cfg.generation, pop.len());
        if arm == Arm::Single {
            let mut best: Option<Record> = None;
            for m in &pop.members {
                let name = format!("single-{}", m.model_id);
                let out = evolve(&name, Population::new(vec![m.clone()])?, &gcfg, seed, cfg, bench, resume)?;
                let before = report.records.len();
                outcome_records(bench, &name, &out, &mut report);
                let last = report.records[before..].last().cloned().expect("final record");
                if best.as_ref().is_none_or(|b| last.map > b.map) {
                    best = Some(last);
                }
            }
            if let Some(b) = best {
                report.records.push(Record {
                    kind: "final".to_owned(),
                    arm: Some("single".to_owned()),
                    note: Some(format!("best of {} single runs", pop.len())),
                    ..b
                });
            }
        } else {
            let out = evolve(arm.name(), pop.clone(), &gcfg, seed, cfg, bench, resume)?;
            outcome_records(bench, arm.name(), &out, &mut report);
        }
    }
    Ok(report)
}

/// Ways of choosing `L` members of the initial population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Game,
    Individual,
    Random,
    Deepest,
    Heaviest,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Game,
        Strategy::Individual,
        Strategy::Random,
        Strategy::Deepest,
        Strategy::Heaviest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Game => "game",
            Strategy::Individual => "individual",
            Strategy::Random => "random",
            Strategy::Deepest => "deepest",
            Strategy::Heaviest => "heaviest",
        }
    }

    /// Sorted indices of the chosen members and the trace, if any.
    pub fn choose(
        self,
        members: &[Embedder],
        l: usize,
        utility: &dyn Utility,
        cache: &UtilityCache,
        seed: u64,
    ) -> Result<(Vec<usize>, Vec<TraceEntry>)> {
        let k = members.len();
        let l = l.min(k);
        let by_key = |key: &dyn Fn(&Embedder) -> (usize, usize)| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| key(&members[b]).cmp(&key(&members[a])).then(a.cmp(&b)));
            let mut top = order[..l].to_vec();
            top.sort_unstable();
            top
        };
        Ok(match self {
            Strategy::Game => {
                let out = brd_select(k, l, utility, cache, None, seed)?;
                (out.subset, out.trace)
            }
            Strategy::Individual => (top_individuals(k, l, utility, cache)?, Vec::new()),
            Strategy::Random => {
                let mut pick = index::sample(&mut seed::rng(seed), k, l).into_vec();
                pick.sort_unstable();
                (pick, Vec::new())
            }
            Strategy::Deepest => (by_key(&|m| (m.arch.widths.len(), m.arch.num_params())), Vec::new()),
            Strategy::Heaviest => (by_key(&|m| (m.arch.num_params(), m.arch.widths.len())), Vec::new()),
        })
    }
}

fn selection_ablation(cfg: &ExperimentConfig, bench: &Bench, resume: bool) -> Result<Report> {
    let pop = bench.population(cfg)?;
    let mut report = Report {
        records: initial_records(bench, cfg, &pop)?,
        traces: BTreeMap::new(),
    };
    let utility = CrsUtility::new(&pop.members, bench.inputs.view(), &cfg.generation.crs, true)?;
    let cache = UtilityCache::new();
    let once = GenerationConfig {
        select: false,
        ..Arm::MultiPmlSel.config(&cfg.generation, pop.len())
    };
    let seed = seed::derive_seed(cfg.seed, &[7]);
    for strategy in Strategy::ALL {
        let (subset, trace) = strategy.choose(&pop.members, cfg.generation.l, &utility, &cache, seed)?;
        let value = cache.get(&subset, &utility)?;
        let mut chosen = pop.clone();
        retain(&mut chosen, &subset);
        let ids = chosen.ids();
        let name = format!("select-{}", strategy.name());
        let out = evolve(&name, chosen, &once, seed, cfg, bench, resume)?;
        if !trace.is_empty() {
            report.traces.insert(name.clone(), trace);
        }
        report.records.push(
            Record {
                arm: Some(strategy.name().to_owned()),
                model_id: Some(out.final_model().model_id),
                crs: Some(out.final_crs),
                utility: Some(value),
                note: Some(join_ids(&ids)),
                ..bench.record("strategy")
            }
            .with_retrieval(out.final_retrieval.as_ref()),
        );
    }
    for (mode, name) in [(SelectionMode::Game, "peg-game"), (SelectionMode::Individual, "peg-individual")] {
        let gcfg = GenerationConfig {
            selection: mode,
            ..cfg.generation.clone()
        };
        let out = evolve(name, pop.clone(), &gcfg, seed, cfg, bench, resume)?;
        outcome_records(bench, name, &out, &mut report);
    }
    Ok(report)
}

/// The three-model table used to illustrate best-response dynamics.
pub fn example_table() -> TableUtility {
    TableUtility::new([
        (vec![0], 1.0),
        (vec![1], 2.0),
        (vec![2], 3.0),
        (vec![0, 1], 4.0),
        (vec![0, 2], 2.5),
        (vec![1, 2], 5.0),
    ])
}

fn brd_trace(cfg: &ExperimentConfig, bench: &Bench) -> Result<Report> {
    let pop = bench.population(cfg)?;
    let crs_utility = CrsUtility::new(&pop.members, bench.inputs.view(), &cfg.generation.crs, true)?;
    let table = example_table();
    let games: [(&str, usize, usize, &dyn Utility); 2] = [
        ("table", 3, 2, &table),
        ("crs", pop.len(), cfg.generation.l, &crs_utility),
    ];
    let mut report = Report::default();
    for (name, k, l, utility) in games {
        let cache = UtilityCache::new();
        let out = brd_select(k, l, utility, &cache, cfg.generation.max_turns, seed::derive_seed(cfg.seed, &[8]))?;
        report.records.push(Record {
            arm: Some(name.to_owned()),
            step: Some(0),
            utility: Some(out.initial_utility),
            note: Some(join_idx(&out.initial.dedup_set())),
            ..bench.record("brd")
        });
        for (i, t) in out.trace.iter().enumerate() {
            report.records.push(Record {
                arm: Some(name.to_owned()),
                step: Some(i + 1),
                utility: Some(t.utility),
                note: Some(join_idx(&t.dedup_set)),
                ..bench.record("brd")
            });
        }
        let nash = nash_check(&out.action, k, utility, &cache)?;
        report.records.push(Record {
            arm: Some(name.to_owned()),
            utility: Some(out.utility),
            metric: Some("nash".to_owned()),
            note: Some(if nash.is_nash { "equilibrium" } else { "not an equilibrium" }.to_owned()),
            ..bench.record("brd-result")
        });
        report.traces.insert(name.to_owned(), out.trace);
    }
    Ok(report)
}

fn join_idx(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Member metrics of a saved generation on a dataset with a query/gallery
/// split. CRS uses the reference settings stored in the checkpoint.
pub fn evaluate_checkpoint(dir: impl AsRef<Path>, dataset: impl AsRef<Path>) -> Result<Vec<Record>> {
    let (pop, manifest) = load_population(dir)?;
    let ds = load_dataset(dataset)?;
    let eval = EvalSet::from_dataset(&ds)?;
    let inputs = ds.inputs();
    pop.members
        .iter()
        .map(|m| {
            let features = l2_normalize_rows(m.forward_features(inputs.view(), true)?);
            let crs_value = if manifest.config.crs.ref_arch.input_dim() == ds.dim() {
                Some(crs(features.view(), inputs.view(), &manifest.config.crs)?)
            } else {
                None
            };
            Ok(Record {
                kind: "eval".to_owned(),
                seed: manifest.seed,
                generation: Some(manifest.generation),
                model_id: Some(m.model_id),
                crs: crs_value,
                ..Record::default()
            }
            .with_retrieval(Some(&eval.retrieval_of(features.view())?)))
        })
        .collect()
}

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_DIR: &str = "traces";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PegError::io(path, e))
}

pub fn to_csv(records: &[Record]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| PegError::Checkpoint(format!("csv buffer: {e}")))
}

pub fn to_json_lines<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes the report in each requested format plus the raw traces, and
/// returns the written paths.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>, formats: &[Format]) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Err(PegError::Config("no report format requested".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| PegError::io(dir, e))?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            Format::Csv => {
                let path = dir.join(CSV_FILE);
                write(&path, &to_csv(&report.records)?)?;
                written.push(path);
            }
            Format::Json => {
                let path = dir.join(JSON_FILE);
                write(&path, &to_json_lines(&report.records)?)?;
                written.push(path);
            }
            Format::Svg => {
                for (name, chart) in charts(report) {
                    let path = dir.join(format!("{name}.svg"));
                    write(&path, chart.render().as_bytes())?;
                    written.push(path);
                }
            }
        }
    }
    let traces = dir.join(TRACE_DIR);
    if !report.traces.is_empty() {
        fs::create_dir_all(&traces).map_err(|e| PegError::io(&traces, e))?;
    }
    for (name, trace) in &report.traces {
        let path = traces.join(format!("{name}.jsonl"));
        write(&path, &to_json_lines(trace)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `config.json` and the report into `cfg.out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, report: &Report) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PegError::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(CONFIG_FILE);
    write(&path, &serde_json::to_vec_pretty(cfg)?)?;
    let mut written = vec![path];
    written.extend(emit_report(report, &cfg.out_dir, &cfg.formats)?);
    Ok(written)
}

/// Reads a report written by [`emit_report`], preferring the JSON lines.
pub fn read_report(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    let json = dir.join(JSON_FILE);
    let csv_path = dir.join(CSV_FILE);
    let records = if json.is_file() {
        let text = fs::read_to_string(&json).map_err(|e| PegError::io(&json, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(PegError::from))
            .collect::<Result<Vec<Record>>>()?
    } else if csv_path.is_file() {
        csv::Reader::from_path(&csv_path)?
            .deserialize()
            .collect::<std::result::Result<Vec<Record>, _>>()?
    } else {
        return Err(PegError::Config(format!("no report found in {}", dir.display())));
    };
    let mut traces = BTreeMap::new();
    let tdir = dir.join(TRACE_DIR);
    if tdir.is_dir() {
        for entry in fs::read_dir(&tdir).map_err(|e| PegError::io(&tdir, e))? {
            let path = entry.map_err(|e| PegError::io(&tdir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".jsonl")) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| PegError::io(&path, e))?;
            let trace = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(PegError::from))
                .collect::<Result<Vec<TraceEntry>>>()?;
            traces.insert(name.to_owned(), trace);
        }
    }
    Ok(Report { records, traces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub kind: ChartKind,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Chart {
    /// A self-contained SVG document.
    pub fn render(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let (pw, ph) = (w - left - right, h - top - bottom);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, top + ph + 16.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, left - 4.0, py + 4.0);
            let _ = writeln!(s, r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##, left + pw);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let finite: Vec<(f64, f64)> = series.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            if self.kind == ChartKind::Line && finite.len() > 1 {
                let path: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            }
            for &(x, y) in &finite {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = top + 14.0 + 16.0 * i as f64;
            let lx = left + pw + 10.0;
            let _ = writeln!(s, r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 14.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn series_by<F>(records: &[&Record], key: impl Fn(&Record) -> String, point: F) -> Vec<Series>
where
    F: Fn(&Record) -> Option<(f64, f64)>,
{
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(p) = point(r) {
            map.entry(key(r)).or_default().push(p);
        }
    }
    map.into_iter().map(|(name, points)| Series { name, points }).collect()
}

/// Charts derived from whichever record kinds the report holds.
pub fn charts(report: &Report) -> Vec<(String, Chart)> {
    let mut out = Vec::new();
    let kind = |k| report.of_kind(k);
    let noise = kind("ics-noise");
    if !noise.is_empty() {
        out.push((
            "ics-vs-label-accuracy".to_owned(),
            Chart {
                title: "Reference ICS under corrupted labels".into(),
                x_label: "label accuracy".into(),
                y_label: "ICS".into(),
                kind: ChartKind::Line,
                series: series_by(&noise, |_| "reference".into(), |r| Some((r.label_accuracy?, r.ics?))),
            },
        ));
    }
    let ranking = kind("ranking");
    if !ranking.is_empty() {
        for (name, f) in [("crs", (|r: &Record| r.crs) as fn(&Record) -> Option<f64>), ("ics", |r: &Record| r.ics)] {
            out.push((
                format!("{name}-vs-map"),
                Chart {
                    title: format!("{} before training vs mAP after", name.to_uppercase()),
                    x_label: name.to_uppercase(),
                    y_label: "mAP".into(),
                    kind: ChartKind::Scatter,
                    series: series_by(&ranking, |_| "models".into(), |r| Some((f(r)?, r.map?))),
                },
            ));
        }
    }
    let members = kind("member");
    if !members.is_empty() {
        let mut best: BTreeMap<(String, usize), f64> = BTreeMap::new();
        for r in &members {
            if let (Some(arm), Some(g), Some(m)) = (&r.arm, r.generation, r.map) {
                let e = best.entry((arm.clone(), g)).or_insert(f64::NEG_INFINITY);
                *e = e.max(m);
            }
        }
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for ((arm, g), m) in best {
            series.entry(arm).or_default().push(((g + 1) as f64, m));
        }
        out.push((
            "map-by-generation".to_owned(),
            Chart {
                title: "Best member mAP per generation".into(),
                x_label: "generation".into(),
                y_label: "mAP".into(),
                kind: ChartKind::Line,
                series: series.into_iter().map(|(name, points)| Series { name, points }).collect(),
            },
        ));
    }
    let brd = kind("brd");
    if !brd.is_empty() {
        out.push((
            "brd-utility".to_owned(),
            Chart {
                title: "Utility along best-response dynamics".into(),
                x_label: "accepted change".into(),
                y_label: "utility".into(),
                kind: ChartKind::Line,
                series: series_by(&brd, |r| r.arm.clone().unwrap_or_default(), |r| Some((r.step? as f64, r.utility?))),
            },
        ));
    }
    let strategies = kind("strategy");
    if !strategies.is_empty() {
        out.push((
            "selection-strategies".to_owned(),
            Chart {
                title: "Selected-set CRS vs final mAP".into(),
                x_label: "CRS of selected set".into(),
                y_label: "mAP".into(),
                kind: ChartKind::Scatter,
                series: series_by(&strategies, |r| r.arm.clone().unwrap_or_default(), |r| Some((r.utility?, r.map?))),
            },
        ));
    }
    out
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset with `cargo test -p peg-core --test acceptance -- 3 7`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use peg_core::clustering::{canonicalize, dbscan, k_reciprocal_jaccard, kmeans_full_batch, DistanceMatrix};
use peg_core::embedder::{softmax_rows, Arch, Embedder, HyperParams};
use peg_core::evolution::{reproduce_mutate, GenerationConfig, Population};
use peg_core::game::{brd_select, nash_check, strictly_increasing, TableUtility, Utility, UtilityCache};
use peg_core::harness::{ics_noise_study, run_preset, write_outputs, Arm, Bench, ExperimentConfig, Format, Record};
use peg_core::metrics::spearman_rho;
use peg_core::objectives::{
    id_loss, logit_grad_to_features, mine_hard_pairs, mutual_id_loss, mutual_triplet_loss, overall_loss,
    softmax_triplet_loss, triplet_statistic, voting_loss, GradWrt, StudentOutputs, TeacherSignals, TeacherSnapshot,
};
use peg_core::seed;
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("peg-acceptance-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn random(rows: usize, cols: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

// 1 ---------------------------------------------------------------------------

fn ics_tracks_label_accuracy() -> Outcome {
    let mut rhos = Vec::new();
    for s in 0..3 {
        let cfg = ExperimentConfig {
            seed: s,
            ..ok(ExperimentConfig::preset("crs-validation"))?
        };
        let bench = ok(Bench::prepare(&cfg))?;
        ensure(bench.dataset.len() == 1000 && bench.dataset.num_identities() == 20, || {
            "benchmark is not 20 ids x 50 samples".into()
        })?;
        let rows = ok(ics_noise_study(&cfg, &bench))?;
        let acc: Vec<f64> = rows.iter().map(|r| r.label_accuracy.unwrap()).collect();
        let ics: Vec<f64> = rows.iter().map(|r| r.ics.unwrap()).collect();
        let rho = ok(spearman_rho(&acc, &ics))?;
        ensure(rho >= 0.8, || format!("seed {s}: rho {rho:.3} (accuracy {acc:.2?}, ics {ics:.3?})"))?;
        rhos.push(rho);
    }
    Ok(format!("rho per seed {rhos:.3?}"))
}

// 2 ---------------------------------------------------------------------------

fn crs_ranks_models() -> Outcome {
    let cfg = ExperimentConfig {
        out_dir: scratch_dir("crs"),
        ..ok(ExperimentConfig::preset("crs-validation"))?
    };
    let report = ok(run_preset(&cfg, false))?;
    let _ = fs::remove_dir_all(&cfg.out_dir);
    let ranked = report.of_kind("ranking");
    ensure(ranked.len() >= 6, || format!("only {} models ranked", ranked.len()))?;
    let corr: BTreeMap<String, (f64, f64)> = report
        .of_kind("correlation")
        .into_iter()
        .map(|r| (r.metric.clone().unwrap(), (r.rho.unwrap_or(f64::NAN), r.tau.unwrap_or(f64::NAN))))
        .collect();
    let (rho, tau) = corr["crs"];
    let summary = corr
        .iter()
        .map(|(k, (r, t))| format!("{k} rho {r:.3} tau {t:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(rho >= 0.7 && tau >= 0.5, || format!("crs below threshold: {summary}"))?;
    for raw in ["ics", "dbi", "sc"] {
        let (r, _) = corr[raw];
        ensure(rho > r || r.is_nan(), || format!("{raw} out-correlates crs: {summary}"))?;
    }
    Ok(summary)
}

// 3 ---------------------------------------------------------------------------

/// All unilateral deviations enumerated straight from the table.
fn is_nash(actions: &[usize], k: usize, table: &TableUtility) -> bool {
    let value = |a: &[usize]| {
        let set: BTreeSet<usize> = a.iter().copied().collect();
        table.table[&set.into_iter().collect::<Vec<_>>()]
    };
    let here = value(actions);
    (0..actions.len()).all(|agent| {
        (0..k).all(|c| {
            let mut dev = actions.to_vec();
            dev[agent] = c;
            value(&dev) <= here
        })
    })
}

fn brd_reaches_equilibria() -> Outcome {
    let mut turns = 0;
    for t in 0..50u64 {
        let k = 2 + (t % 5) as usize;
        let table = TableUtility::random(k, 2, seed::derive_seed(7, &[t]));
        let cache = UtilityCache::new();
        let out = ok(brd_select(k, 2, &table, &cache, None, t))?;
        ensure(out.converged, || format!("table {t}: no convergence"))?;
        ensure(strictly_increasing(out.initial_utility, &out.trace), || {
            format!("table {t}: accepted change without strict gain")
        })?;
        let mut prev = out.initial_utility;
        for e in &out.trace {
            let u = ok(table.evaluate(&e.dedup_set))?;
            ensure(u == e.utility, || format!("table {t}: trace utility disagrees with table"))?;
            ensure(!e.changed || u > prev, || format!("table {t}: non-improving change"))?;
            prev = u;
        }
        let report = ok(nash_check(&out.action, k, &table, &cache))?;
        ensure(report.is_nash, || format!("table {t}: {:?}", report.deviation))?;
        ensure(is_nash(&out.action.actions, k, &table), || {
            format!("table {t}: enumeration finds a profitable deviation")
        })?;
        turns += out.trace.len();
    }
    Ok(format!("50 tables, {turns} turns in total"))
}

// 4 ---------------------------------------------------------------------------

/// Worst relative error between `grad` and central differences of `f`.
fn fd_error(x: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.raw_dim()) {
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        let ana = grad[idx];
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
    }
    worst
}

struct Fixture {
    feats: Array2<f64>,
    scores: Array2<f64>,
    targets: Vec<usize>,
    labels: Vec<i32>,
    teachers: Vec<(Array2<f64>, Array2<f64>)>,
    hyper: HyperParams,
}

fn fixture(s: u64) -> Fixture {
    let mut rng = seed::rng(seed::derive_seed(4, &[s]));
    let targets: Vec<usize> = (0..8).map(|i| i / 2).collect();
    Fixture {
        feats: random(8, 5, &mut rng),
        scores: random(8, 4, &mut rng) * 2.0,
        labels: targets.iter().map(|&t| t as i32).collect(),
        targets,
        teachers: (0..2)
            .map(|_| (random(8, 5, &mut rng), softmax_rows(&(random(8, 4, &mut rng) * 2.0))))
            .collect(),
        hyper: HyperParams {
            eps: rng.random_range(0.05..0.3),
            w_id: rng.random_range(0.2..1.0),
            w_tri: rng.random_range(0.2..1.0),
            w_mid: rng.random_range(0.2..1.0),
            w_mtri: rng.random_range(0.2..1.0),
            ..HyperParams::default()
        },
    }
}

fn gradient_audit() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for s in 0..3 {
        let fx = fixture(s);
        let pairs = ok(mine_hard_pairs(fx.feats.view(), &fx.labels))?;
        let (t_feats, t_probs) = &fx.teachers[0];

        let id = |x: &Array2<f64>| id_loss(softmax_rows(x).view(), &fx.targets, fx.hyper.eps).unwrap();
        note("identity", fd_error(&fx.scores, &id(&fx.scores).grad, |x| id(x).value));

        let mid = |x: &Array2<f64>| mutual_id_loss(softmax_rows(x).view(), t_probs.view(), GradWrt::Student).unwrap();
        note("mutual identity", fd_error(&fx.scores, &mid(&fx.scores).grad, |x| mid(x).value));

        let tri = |x: &Array2<f64>| softmax_triplet_loss(x.view(), &pairs).unwrap();
        note("triplet", fd_error(&fx.feats, &tri(&fx.feats).grad, |x| tri(x).value));

        let t_stat = triplet_statistic(t_feats.view(), &pairs);
        let mtri = |x: &Array2<f64>| {
            mutual_triplet_loss(&triplet_statistic(x.view(), &pairs), &t_stat, GradWrt::Student).unwrap()
        };
        let g = logit_grad_to_features(fx.feats.view(), &pairs, &mtri(&fx.feats).grad_logit);
        note("mutual triplet", fd_error(&fx.feats, &g, |x| mtri(x).value));

        // voting: gradients of its two terms, weighted
        let (w_id, w_tri) = (fx.hyper.w_id, fx.hyper.w_tri);
        let vot_f = |x: &Array2<f64>| voting_loss(id(&fx.scores).value, tri(x).value, w_id, w_tri);
        note("voting (features)", fd_error(&fx.feats, &(tri(&fx.feats).grad * w_tri), vot_f));
        let vot_s = |x: &Array2<f64>| voting_loss(id(x).value, tri(&fx.feats).value, w_id, w_tri);
        note("voting (scores)", fd_error(&fx.scores, &(id(&fx.scores).grad * w_id), vot_s));

        let teachers: Vec<TeacherSignals> = fx
            .teachers
            .iter()
            .enumerate()
            .map(|(i, (f, p))| {
                let snap = TeacherSnapshot {
                    model_id: i as u64,
                    features: f.clone(),
                    probs: p.clone(),
                };
                TeacherSignals::from_snapshot(&snap, &pairs)
            })
            .collect();
        let all = |f: &Array2<f64>, x: &Array2<f64>| {
            let probs = softmax_rows(x);
            let student = StudentOutputs {
                features: f.view(),
                probs: probs.view(),
            };
            overall_loss(student, &fx.targets, &pairs, &teachers, &fx.hyper).unwrap()
        };
        let out = all(&fx.feats, &fx.scores);
        note("overall (features)", fd_error(&fx.feats, &out.d_features, |x| all(x, &fx.scores).value));
        note("overall (scores)", fd_error(&fx.scores, &out.d_scores, |x| all(&fx.feats, x).value));
    }
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.values().all(|&v| v < 1e-4), || format!("relative error too large: {summary}"))?;
    Ok(format!("worst relative error: {summary}"))
}

// 5 ---------------------------------------------------------------------------

fn final_map(records: &[&Record], arm: &str) -> Result<f64, String> {
    records
        .iter()
        .find(|r| r.arm.as_deref() == Some(arm))
        .and_then(|r| r.map)
        .ok_or_else(|| format!("no final mAP for {arm}"))
}

fn ablation_ordering() -> Outcome {
    let mut lines = Vec::new();
    let mut passed = 0;
    for s in 0..3 {
        let cfg = ExperimentConfig {
            seed: s,
            arms: vec![Arm::Single, Arm::MultiPml, Arm::Peg],
            out_dir: scratch_dir(&format!("peg-{s}")),
            ..ok(ExperimentConfig::preset("peg"))?
        };
        let report = ok(run_preset(&cfg, false))?;
        let _ = fs::remove_dir_all(&cfg.out_dir);
        let finals = report.of_kind("final");
        let single = final_map(&finals, "single")?;
        let mpml = final_map(&finals, "multi-pml")?;
        let peg = final_map(&finals, "peg")?;
        let good = peg >= mpml && mpml >= single && peg - single >= 0.03;
        passed += usize::from(good);
        lines.push(format!(
            "seed {s}: peg {:.1} multi-pml {:.1} single {:.1}{}",
            100.0 * peg,
            100.0 * mpml,
            100.0 * single,
            if good { "" } else { " (miss)" }
        ));
    }
    let summary = lines.join("; ");
    ensure(passed >= 2, || format!("ordering held on {passed}/3 seeds: {summary}"))?;
    Ok(summary)
}

// 6 ---------------------------------------------------------------------------

fn mutation_laws() -> Outcome {
    let mut rng = seed::rng(6);
    let arch = ok(Arch::new(vec![6, 8, 4]))?;
    let members = (0..3)
        .map(|i| {
            let hyper = HyperParams {
                eps: rng.random_range(0.05..0.5),
                w_id: rng.random_range(0.1..1.0),
                w_tri: rng.random_range(0.1..1.0),
                w_mid: rng.random_range(0.1..1.0),
                w_mtri: rng.random_range(0.1..1.0),
                lr: rng.random_range(1e-4..1e-2),
            };
            Embedder::init(arch.clone(), hyper, i)
        })
        .collect::<Result<Vec<_>, _>>();
    let mut pop = ok(Population::new(ok(members)?))?;
    let parents: HashMap<u64, HyperParams> = pop.members.iter().map(|m| (m.model_id, m.hyper)).collect();
    let cfg = GenerationConfig {
        r: 0.5,
        h: 3,
        l: 3,
        ..GenerationConfig::default()
    };
    reproduce_mutate(&mut pop, &cfg, 11);
    ensure(pop.len() == 12, || format!("population of {}", pop.len()))?;
    let mut clones = 0;
    for m in &pop.members {
        if let Some(&h) = parents.get(&m.model_id) {
            ensure(m.hyper == h, || format!("parent {} changed", m.model_id))?;
            continue;
        }
        clones += 1;
        let parent = m.lineage.and_then(|l| parents.get(&l)).ok_or("clone without parent")?;
        for (v, p) in m.hyper.to_array().iter().zip(parent.to_array()) {
            ensure((0.5 * p..=1.5 * p).contains(v), || format!("model {}: {v} outside [{}, {}]", m.model_id, 0.5 * p, 1.5 * p))?;
        }
    }
    ensure(clones == 9, || format!("{clones} clones"))?;
    Ok("12 members, 9 mutated clones within bounds".into())
}

// 7 ---------------------------------------------------------------------------

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain Lloyd iterations from the two mutually farthest points.
fn lloyd_two(x: ArrayView2<f64>) -> Vec<i32> {
    let n = x.nrows();
    let (mut a, mut b, mut far) = (0, 0, -1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq(x.row(i), x.row(j));
            if d > far {
                (a, b, far) = (i, j, d);
            }
        }
    }
    let mut centers = vec![x.row(a).to_owned(), x.row(b).to_owned()];
    let mut labels = vec![0i32; n];
    for _ in 0..100 {
        let next: Vec<i32> = (0..n)
            .map(|i| i32::from(sq(x.row(i), centers[1].view()) < sq(x.row(i), centers[0].view())))
            .collect();
        for (c, center) in centers.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| next[i] == c as i32).collect();
            if !rows.is_empty() {
                *center = rows.iter().map(|&i| x.row(i).to_owned()).reduce(|s, r| s + r).unwrap() / rows.len() as f64;
            }
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    canonicalize(&labels)
}

/// Breadth-first DBSCAN as usually written: clusters grow from unvisited
/// core points in index order.
fn textbook_dbscan(d: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<i32> {
    const UNSEEN: i32 = -2;
    let n = d.len();
    let region = |i: usize| (0..n).filter(|&j| d.get(i, j) <= eps).collect::<Vec<_>>();
    let mut labels = vec![UNSEEN; n];
    let mut next = 0;
    for p in 0..n {
        if labels[p] != UNSEEN {
            continue;
        }
        let seeds = region(p);
        if seeds.len() < min_samples {
            labels[p] = -1;
            continue;
        }
        labels[p] = next;
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                -1 => labels[q] = next,
                UNSEEN => {
                    labels[q] = next;
                    let nq = region(q);
                    if nq.len() >= min_samples {
                        queue.extend(nq);
                    }
                }
                _ => {}
            }
        }
        next += 1;
    }
    canonicalize(&labels)
}

/// Reciprocal neighbour sets built by direct enumeration.
fn enumerated_jaccard(x: ArrayView2<f64>, k1: usize, k2: usize) -> Array2<f64> {
    let n = x.nrows();
    let dist = |i: usize, j: usize| if i == j { 0.0 } else { sq(x.row(i), x.row(j)).sqrt() };
    let order = |i: usize| {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
        std::iter::once(i).chain(others).collect::<Vec<_>>()
    };
    let ranks: Vec<Vec<usize>> = (0..n).map(order).collect();
    let knn = |i: usize, k: usize| ranks[i][..=k].iter().copied().collect::<BTreeSet<_>>();
    let recip = |i: usize, k: usize| {
        knn(i, k)
            .into_iter()
            .filter(|&j| knn(j, k).contains(&i))
            .collect::<BTreeSet<_>>()
    };
    let half = ((k1 as f64) / 2.0).round().max(1.0) as usize;
    let sets: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| {
            let base = recip(i, k1);
            let mut set = base.clone();
            for &q in &base {
                let cand = recip(q, half);
                if 3 * cand.intersection(&base).count() > 2 * cand.len() {
                    set.extend(cand);
                }
            }
            let keep: BTreeSet<usize> = ranks[i].iter().copied().filter(|j| set.contains(j)).take(k2).collect();
            keep
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 0.0;
        }
        let inter = sets[i].intersection(&sets[j]).count();
        let union = sets[i].union(&sets[j]).count();
        1.0 - inter as f64 / union as f64
    })
}

fn clustering_oracles() -> Outcome {
    let mut rng = seed::rng(77);
    for t in 0..10 {
        let n = 20 + 4 * t;
        let x = Array2::from_shape_fn((n, 3), |(i, _)| {
            let center = if i % 2 == 0 { -3.0 } else { 3.0 };
            center + rng.random_range(-1.0..1.0) * (1.0 + 0.2 * t as f64)
        });
        let ours = ok(kmeans_full_batch(x.view(), 2, t as u64, 100))?.0.labels;
        ensure(canonicalize(&ours) == lloyd_two(x.view()), || format!("k-means instance {t} differs"))?;
    }
    for t in 0..10 {
        let n = 15 + 3 * t;
        let x = random(n, 2, &mut rng);
        let d = peg_core::clustering::pairwise_l2(x.view());
        let mut all: Vec<f64> = d.0.iter().copied().filter(|&v| v > 0.0).collect();
        all.sort_by(f64::total_cmp);
        let eps = all[all.len() / 12];
        let min_samples = 2 + t % 4;
        let ours = ok(dbscan(&d, eps, min_samples))?.labels;
        ensure(canonicalize(&ours) == textbook_dbscan(&d, eps, min_samples), || {
            format!("dbscan instance {t} differs")
        })?;
    }
    for t in 0..10 {
        let n = 11 + t;
        let x = random(n, 3, &mut rng);
        let (k1, k2) = (2 + t % 4, 3 + t % 6);
        let ours = ok(k_reciprocal_jaccard(x.view(), k1, k2))?;
        ensure(ours.0 == enumerated_jaccard(x.view(), k1, k2), || format!("jaccard instance {t} differs"))?;
    }
    Ok("10 k-means, 10 DBSCAN and 10 Jaccard instances agree".into())
}

// 8 ---------------------------------------------------------------------------

/// Every checkpoint file below `dir`, keyed by relative path.
fn snapshot_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_smoke(cfg: &ExperimentConfig, resume: bool) -> Result<(Vec<u8>, BTreeMap<PathBuf, Vec<u8>>), String> {
    let report = ok(run_preset(cfg, resume))?;
    ok(write_outputs(cfg, &report))?;
    let csv = ok(fs::read(cfg.out_dir.join("report.csv")))?;
    Ok((csv, snapshot_files(&cfg.out_dir.join("checkpoints"))))
}

fn deterministic_checkpoints() -> Outcome {
    let cfg = ExperimentConfig {
        out_dir: scratch_dir("smoke"),
        formats: vec![Format::Csv],
        ..ok(ExperimentConfig::preset("smoke"))?
    };
    ensure(cfg.generation.generations == 2, || "smoke run is not two generations".into())?;
    let (csv, params) = run_smoke(&cfg, false)?;
    ensure(params.keys().any(|p| p.starts_with("peg/gen-2")), || "no second-generation checkpoint".into())?;

    ok(fs::remove_dir_all(&cfg.out_dir))?;
    let (csv2, params2) = run_smoke(&cfg, false)?;
    ensure(csv == csv2, || "fresh rerun changed the CSV report".into())?;
    ensure(params == params2, || "fresh rerun changed the checkpoints".into())?;

    let mut dropped = 0;
    for arm in ok(fs::read_dir(cfg.out_dir.join("checkpoints")))?.flatten() {
        let last = arm.path().join("gen-2");
        if last.exists() {
            ok(fs::remove_dir_all(&last))?;
            dropped += 1;
        }
    }
    ensure(dropped > 0, || "nothing to resume".into())?;
    let (csv3, params3) = run_smoke(&cfg, true)?;
    let _ = fs::remove_dir_all(&cfg.out_dir);
    ensure(csv == csv3, || "resumed run changed the CSV report".into())?;
    ensure(params == params3, || "resumed run changed the checkpoints".into())?;
    Ok(format!(
        "{} checkpoint files and {} CSV bytes identical after rerun and resume of {dropped} runs",
        params.len(),
        csv.len()
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "ICS follows pseudo-label accuracy", budget: Duration::from_secs(120), run: ics_tracks_label_accuracy },
        Criterion { id: 2, name: "CRS ranks models by later mAP", budget: Duration::from_secs(600), run: crs_ranks_models },
        Criterion { id: 3, name: "best-response dynamics reach Nash equilibria", budget: Duration::from_secs(10), run: brd_reaches_equilibria },
        Criterion { id: 4, name: "loss gradients match finite differences", budget: Duration::from_secs(30), run: gradient_audit },
        Criterion { id: 5, name: "ablation ordering PEG >= multi+PML >= single", budget: Duration::from_secs(1200), run: ablation_ordering },
        Criterion { id: 6, name: "population size and mutation bounds", budget: Duration::from_secs(1), run: mutation_laws },
        Criterion { id: 7, name: "clustering matches reference oracles", budget: Duration::from_secs(10), run: clustering_oracles },
        Criterion { id: 8, name: "reruns and resumes are bit-identical", budget: Duration::from_secs(300), run: deterministic_checkpoints },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget))
            }
        });
        match result {
            Ok(detail) => println!("PASS [{}] {} ({elapsed:.1?}): {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {} ({elapsed:.1?}): {detail}", c.id, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

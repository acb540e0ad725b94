//! Cooperative selection game: `L` agents each pick one population member,
//! the team is scored by the CRS of the selected ensemble, and best-response
//! dynamics drive the joint action to a pure Nash equilibrium.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{PegError, Result};
use crate::metrics::{crs, CrsConfig};
use crate::seed;

/// One model index per agent. Duplicates are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub actions: Vec<usize>,
}

impl JointAction {
    pub fn new(actions: Vec<usize>, population: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(PegError::Config("joint action needs at least one agent".into()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= population) {
            return Err(PegError::Config(format!(
                "action {bad} outside population of {population}"
            )));
        }
        Ok(Self { actions })
    }

    /// Sorted distinct indices: the models actually selected.
    pub fn dedup_set(&self) -> Vec<usize> {
        let mut s = self.actions.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn with(&self, agent: usize, action: usize) -> Self {
        let mut next = self.clone();
        next.actions[agent] = action;
        next
    }
}

/// Team utility of a set of selected models (sorted, distinct indices).
pub trait Utility: Sync {
    fn evaluate(&self, subset: &[usize]) -> Result<f64>;
}

impl<F> Utility for F
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        self(subset)
    }
}

/// Exact utilities for every subset, for tests and traces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableUtility {
    pub table: HashMap<Vec<usize>, f64>,
}

impl TableUtility {
    pub fn new(entries: impl IntoIterator<Item = (Vec<usize>, f64)>) -> Self {
        Self {
            table: entries
                .into_iter()
                .map(|(mut k, v)| {
                    k.sort_unstable();
                    k.dedup();
                    (k, v)
                })
                .collect(),
        }
    }

    /// Random utilities for every non-empty subset of `0..k` of size at
    /// most `l`.
    pub fn random(k: usize, l: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut table = HashMap::new();
        for mask in 1u64..(1 << k) {
            if mask.count_ones() as usize <= l {
                let subset: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
                table.insert(subset, rng.random_range(0.0..1.0));
            }
        }
        Self { table }
    }
}

impl Utility for TableUtility {
    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        self.table
            .get(subset)
            .copied()
            .ok_or_else(|| PegError::Metric(format!("no table entry for {subset:?}")))
    }
}

/// Memoised utilities keyed by the selected set.
#[derive(Debug, Default)]
pub struct UtilityCache {
    table: RwLock<HashMap<Vec<usize>, f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl UtilityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.table.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.table.write().expect("cache lock").clear();
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }

    /// Cached entries sorted by key.
    pub fn entries(&self) -> Vec<(Vec<usize>, f64)> {
        let mut v: Vec<_> = self
            .table
            .read()
            .expect("cache lock")
            .iter()
            .map(|(k, &u)| (k.clone(), u))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn get(&self, key: &[usize], utility: &dyn Utility) -> Result<f64> {
        Ok(self.get_many(&[key.to_vec()], utility)?[0])
    }

    /// Looks up every key, evaluating the distinct missing ones in parallel.
    /// A key repeated within one call counts as a hit after its first use.
    pub fn get_many(&self, keys: &[Vec<usize>], utility: &dyn Utility) -> Result<Vec<f64>> {
        let mut missing: Vec<Vec<usize>> = Vec::new();
        {
            let table = self.table.read().expect("cache lock");
            let mut scheduled = HashSet::new();
            for k in keys {
                if table.contains_key(k) || scheduled.contains(k) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    scheduled.insert(k.clone());
                    missing.push(k.clone());
                }
            }
        }
        let fresh: Vec<f64> = missing
            .par_iter()
            .map(|k| utility.evaluate(k))
            .collect::<Result<_>>()?;
        let mut table = self.table.write().expect("cache lock");
        for (k, u) in missing.into_iter().zip(fresh) {
            table.insert(k, u);
        }
        Ok(keys.iter().map(|k| table[k]).collect())
    }
}

/// Per-member features L2-normalised per row and concatenated in ascending
/// `model_id` order.
pub fn ensemble_features(members: &[&Embedder], inputs: ArrayView2<f64>, use_ema: bool) -> Result<Array2<f64>> {
    if members.is_empty() {
        return Err(PegError::Config("ensemble needs at least one model".into()));
    }
    let mut ordered: Vec<&Embedder> = members.to_vec();
    ordered.sort_by_key(|m| m.model_id);
    let blocks = ordered
        .par_iter()
        .map(|m| m.forward_features(inputs, use_ema).map(l2_normalize_rows))
        .collect::<Result<Vec<_>>>()?;
    concat_blocks(&blocks.iter().map(|b| b.view()).collect::<Vec<_>>())
}

fn concat_blocks(blocks: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    concatenate(Axis(1), blocks).map_err(|e| PegError::Config(format!("feature shapes: {e}")))
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn l2_normalize_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    x
}

/// CRS of the ensemble of the selected population members.
pub struct CrsUtility<'a> {
    /// Normalised features of each member, in population order.
    features: Vec<Array2<f64>>,
    model_ids: Vec<u64>,
    inputs: ArrayView2<'a, f64>,
    cfg: &'a CrsConfig,
}

impl<'a> CrsUtility<'a> {
    pub fn new(population: &[Embedder], inputs: ArrayView2<'a, f64>, cfg: &'a CrsConfig, use_ema: bool) -> Result<Self> {
        let features = population
            .par_iter()
            .map(|m| m.forward_features(inputs, use_ema).map(l2_normalize_rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            model_ids: population.iter().map(|m| m.model_id).collect(),
            inputs,
            cfg,
        })
    }

    pub fn subset_features(&self, subset: &[usize]) -> Result<Array2<f64>> {
        let mut ordered = subset.to_vec();
        ordered.sort_by_key(|&i| self.model_ids[i]);
        concat_blocks(&ordered.iter().map(|&i| self.features[i].view()).collect::<Vec<_>>())
    }
}

impl Utility for CrsUtility<'_> {
    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        if subset.is_empty() || subset.iter().any(|&i| i >= self.features.len()) {
            return Err(PegError::Config(format!("invalid subset {subset:?}")));
        }
        crs(self.subset_features(subset)?.view(), self.inputs, self.cfg)
    }
}

/// Best action for `agent` given the others: argmax over all `k` models,
/// keeping the current action unless another is strictly better.
pub fn best_response(
    agent: usize,
    action: &JointAction,
    k: usize,
    utility: &dyn Utility,
    cache: &UtilityCache,
) -> Result<(usize, f64)> {
    let keys: Vec<Vec<usize>> = (0..k).map(|c| action.with(agent, c).dedup_set()).collect();
    let values = cache.get_many(&keys, utility)?;
    let current = action.actions[agent];
    let mut best = (current, values[current]);
    for (c, &u) in values.iter().enumerate() {
        if u > best.1 {
            best = (c, u);
        }
    }
    Ok(best)
}

/// One agent turn of best-response dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Full passes over the agents completed before this turn.
    pub round: usize,
    pub agent: usize,
    pub action_vector: Vec<usize>,
    pub dedup_set: Vec<usize>,
    pub utility: f64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrdOutcome {
    pub action: JointAction,
    pub subset: Vec<usize>,
    pub utility: f64,
    pub initial: JointAction,
    pub initial_utility: f64,
    pub trace: Vec<TraceEntry>,
    /// False when the turn budget ran out first.
    pub converged: bool,
}

/// Agents best-respond in a fixed cycle from a random start until `l`
/// consecutive turns leave the joint action unchanged, or `max_turns`
/// turns have been taken (default `10 * l * k`).
pub fn brd_select(
    k: usize,
    l: usize,
    utility: &dyn Utility,
    cache: &UtilityCache,
    max_turns: Option<usize>,
    seed: u64,
) -> Result<BrdOutcome> {
    if k == 0 || l == 0 {
        return Err(PegError::Config("selection needs K >= 1 and L >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let initial = JointAction::new((0..l).map(|_| rng.random_range(0..k)).collect(), k)?;
    let initial_utility = cache.get(&initial.dedup_set(), utility)?;
    let mut action = initial.clone();
    let mut value = initial_utility;
    let mut trace = Vec::new();
    let budget = max_turns.unwrap_or(10 * l * k);
    let mut unchanged = 0;
    let mut converged = k == 1;
    if !converged {
        for turn in 0..budget {
            let agent = turn % l;
            let (choice, u) = best_response(agent, &action, k, utility, cache)?;
            let changed = choice != action.actions[agent];
            if changed {
                action = action.with(agent, choice);
                value = u;
                unchanged = 0;
            } else {
                unchanged += 1;
            }
            trace.push(TraceEntry {
                round: turn / l,
                agent,
                action_vector: action.actions.clone(),
                dedup_set: action.dedup_set(),
                utility: value,
                changed,
            });
            if unchanged >= l {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("best-response dynamics stopped after {budget} turns without equilibrium");
    }
    Ok(BrdOutcome {
        subset: action.dedup_set(),
        action,
        utility: value,
        initial,
        initial_utility,
        trace,
        converged,
    })
}

/// Whether each accepted change in a trace strictly raised the utility.
pub fn strictly_increasing(initial_utility: f64, trace: &[TraceEntry]) -> bool {
    let mut prev = initial_utility;
    trace.iter().all(|t| {
        let ok = !t.changed || t.utility > prev;
        prev = t.utility;
        ok
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub agent: usize,
    pub from: usize,
    pub to: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub is_nash: bool,
    /// The most improving unilateral deviation, if any.
    pub deviation: Option<Deviation>,
}

/// Exhaustive check of all unilateral deviations.
pub fn nash_check(action: &JointAction, k: usize, utility: &dyn Utility, cache: &UtilityCache) -> Result<NashReport> {
    let before = cache.get(&action.dedup_set(), utility)?;
    let mut best: Option<Deviation> = None;
    for (agent, &from) in action.actions.iter().enumerate() {
        let keys: Vec<Vec<usize>> = (0..k).map(|c| action.with(agent, c).dedup_set()).collect();
        for (to, after) in cache.get_many(&keys, utility)?.into_iter().enumerate() {
            if after > before && best.is_none_or(|d| after > d.after) {
                best = Some(Deviation {
                    agent,
                    from,
                    to,
                    before,
                    after,
                });
            }
        }
    }
    Ok(NashReport {
        is_nash: best.is_none(),
        deviation: best,
    })
}

/// Writes a trace as JSON lines.
pub fn write_trace(trace: &[TraceEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| PegError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in trace {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| PegError::io(path, e))?;
    }
    w.flush().map_err(|e| PegError::io(path, e))
}

//! Two-phase search for the best set of channel replacement pairs.
//!
//! Phase 1 scores every single edit against the unedited baseline and keeps
//! the `N` edits with the largest score gain. Phase 2 scores every valid
//! non-empty subset of those `N` edits and returns the best one, falling
//! back to the empty plan when nothing beats the baseline.
//!
//! Scorer calls: `1 + C(C-1)` for phase 1 (plus `C` when zero edits are
//! swept) and one per valid subset in phase 2. Identity pairs are never
//! scored. Subsets that edit the same channel twice are skipped.
//!
//! Every tie is broken the same way: higher score, then fewer edits, then
//! the lexicographically smaller (sorted) edit list. Results are collected
//! in enumeration order, so they do not depend on the worker count.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remap::{plan_to_map, ChannelEdit, ChannelMap, ChannelPlan, PlanFile};
use crate::scorer::Scorer;

pub const DEFAULT_TOP_N: usize = 10;
/// Phase 2 enumerates `2^N - 1` subsets.
pub const MAX_TOP_N: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub top_n: usize,
    pub allow_zero_edits: bool,
    /// Images used in phase 2; `None` reuses the full search set.
    pub eval_subset: Option<Vec<usize>>,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            top_n: DEFAULT_TOP_N,
            allow_zero_edits: false,
            eval_subset: None,
            parallelism: 1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_TOP_N).contains(&self.top_n) {
            return Err(Error::InvalidConfig(format!(
                "top_n must be in 1..={MAX_TOP_N}, got {}",
                self.top_n
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidConfig("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepEntry {
    pub edit: ChannelEdit,
    pub delta: f64,
}

/// Score gain of each single edit over the baseline, in `(i, j)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSweepTable {
    pub baseline: f64,
    pub entries: Vec<SweepEntry>,
}

impl PairSweepTable {
    pub fn delta(&self, edit: &ChannelEdit) -> Option<f64> {
        self.entries.iter().find(|e| e.edit == *edit).map(|e| e.delta)
    }
}

/// The `N` best single edits, ordered by delta descending then edit ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct TopNSet {
    pub entries: Vec<SweepEntry>,
}

impl TopNSet {
    pub fn edits(&self) -> Vec<ChannelEdit> {
        self.entries.iter().map(|e| e.edit).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub baseline: u64,
    pub sweep: u64,
    pub combos: u64,
}

impl CallLedger {
    pub fn total(&self) -> u64 {
        self.baseline + self.sweep + self.combos
    }
}

/// The nominal `C² + 2^N − 1` inference count, which includes identity pairs
/// and every subset regardless of validity.
pub fn nominal_call_count(channels: usize, top_n: usize) -> u128 {
    (channels as u128).pow(2) + (1u128 << top_n) - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPlan {
    pub plan: ChannelPlan,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub channels: usize,
    /// Phase-2 baseline (equal to `table.baseline` unless phase 2 uses another split).
    pub baseline: f64,
    pub best_plan: ChannelPlan,
    pub best_score: f64,
    pub per_size_best: BTreeMap<usize, ScoredPlan>,
    pub scorer_calls: CallLedger,
    pub table: PairSweepTable,
    pub top_n: TopNSet,
    pub seed: u64,
}

/// Phase 2 output before it is folded into a [`SearchResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationOutcome {
    pub best_plan: ChannelPlan,
    pub best_score: f64,
    pub per_size_best: BTreeMap<usize, ScoredPlan>,
    pub calls: u64,
}

/// `a` is preferred over `b`: higher score, then fewer edits, then smaller edit list.
pub(crate) fn prefer(a_score: f64, a: &ChannelPlan, b_score: f64, b: &ChannelPlan) -> bool {
    match a_score.total_cmp(&b_score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match a.len().cmp(&b.len()) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a.edits() < b.edits(),
        },
    }
}

/// Maps `f` over `items` with up to `parallelism` workers, preserving order.
/// The first error in item order wins.
fn ordered_map<T, U, F>(items: &[T], parallelism: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    let results: Vec<Result<U>> = if parallelism <= 1 {
        items.iter().map(&f).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        pool.install(|| items.par_iter().map(&f).collect())
    };
    results.into_iter().collect()
}

fn single_edit_map(edit: ChannelEdit, channels: usize) -> ChannelMap {
    let plan = ChannelPlan::new(vec![edit]).expect("single edit is a valid plan");
    plan_to_map(&plan, channels).expect("edit indices are in range")
}

fn sweep_edits(
    scorer: &dyn Scorer,
    edits: &[ChannelEdit],
    baseline: f64,
    parallelism: usize,
) -> Result<Vec<SweepEntry>> {
    let channels = scorer.channels();
    ordered_map(edits, parallelism, |&edit| {
        let score = scorer
            .score(&single_edit_map(edit, channels), None)
            .map_err(|e| Error::scoring(format!("edit {edit:?}"), e))?;
        Ok(SweepEntry {
            edit,
            delta: score.aggregate - baseline,
        })
    })
}

fn baseline_of(scorer: &dyn Scorer, images: Option<&[usize]>) -> Result<f64> {
    scorer
        .score(&ChannelMap::identity(scorer.channels()), images)
        .map(|s| s.aggregate)
        .map_err(|e| Error::scoring("baseline", e))
}

/// Phase 1: the baseline plus every ordered pair `i ≠ j` (and every zero
/// edit when enabled).
pub fn pair_sweep(scorer: &dyn Scorer, config: &SearchConfig) -> Result<PairSweepTable> {
    let channels = scorer.channels();
    let mut edits = Vec::with_capacity(channels * channels);
    for i in 0..channels {
        for j in (0..channels).filter(|&j| j != i) {
            edits.push(ChannelEdit::replace(i, j));
        }
    }
    if config.allow_zero_edits {
        edits.extend((0..channels).map(ChannelEdit::zero));
    }
    let baseline = baseline_of(scorer, None)?;
    debug!("baseline {baseline}; sweeping {} edits", edits.len());
    let entries = sweep_edits(scorer, &edits, baseline, config.parallelism.max(1))?;
    Ok(PairSweepTable { baseline, entries })
}

/// Scores zeroing each channel in turn: `1 + C` calls.
pub fn zero_ablation_sweep(scorer: &dyn Scorer, parallelism: usize) -> Result<PairSweepTable> {
    let edits: Vec<ChannelEdit> = (0..scorer.channels()).map(ChannelEdit::zero).collect();
    let baseline = baseline_of(scorer, None)?;
    let entries = sweep_edits(scorer, &edits, baseline, parallelism.max(1))?;
    Ok(PairSweepTable { baseline, entries })
}

/// The `n` entries with the largest delta; ties go to the smaller edit.
/// Negative deltas stay eligible.
pub fn select_top_n(table: &PairSweepTable, n: usize) -> TopNSet {
    let mut entries = table.entries.clone();
    entries.sort_by(|a, b| b.delta.total_cmp(&a.delta).then_with(|| a.edit.cmp(&b.edit)));
    entries.truncate(n);
    TopNSet { entries }
}

/// Phase 2: scores every valid non-empty subset of `top_n` against `baseline`.
pub fn enumerate_combinations(
    scorer: &dyn Scorer,
    top_n: &TopNSet,
    baseline: f64,
    config: &SearchConfig,
) -> Result<CombinationOutcome> {
    let edits = top_n.edits();
    if edits.len() > MAX_TOP_N {
        return Err(Error::InvalidConfig(format!(
            "{} candidates exceeds the enumeration limit {MAX_TOP_N}",
            edits.len()
        )));
    }
    let channels = scorer.channels();
    let plans: Vec<ChannelPlan> = (1u32..1 << edits.len())
        .filter_map(|mask| {
            let subset = (0..edits.len())
                .filter(|b| mask >> b & 1 == 1)
                .map(|b| edits[b])
                .collect();
            ChannelPlan::new(subset).ok()
        })
        .collect();
    debug!("enumerating {} valid subsets of {} edits", plans.len(), edits.len());

    let images = config.eval_subset.as_deref();
    let scores = ordered_map(&plans, config.parallelism.max(1), |plan| {
        let map = plan_to_map(plan, channels)?;
        scorer
            .score(&map, images)
            .map(|s| s.aggregate)
            .map_err(|e| Error::scoring(format!("subset {:?}", plan.edits()), e))
    })?;

    let mut best = ScoredPlan {
        plan: ChannelPlan::empty(),
        score: baseline,
    };
    let mut per_size: BTreeMap<usize, ScoredPlan> = BTreeMap::new();
    for (plan, &score) in plans.iter().zip(&scores) {
        if prefer(score, plan, best.score, &best.plan) {
            best = ScoredPlan {
                plan: plan.clone(),
                score,
            };
        }
        let slot = per_size.entry(plan.len());
        match slot {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(ScoredPlan {
                    plan: plan.clone(),
                    score,
                });
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                if prefer(score, plan, o.get().score, &o.get().plan) {
                    o.insert(ScoredPlan {
                        plan: plan.clone(),
                        score,
                    });
                }
            }
        }
    }
    Ok(CombinationOutcome {
        best_plan: best.plan,
        best_score: best.score,
        per_size_best: per_size,
        calls: plans.len() as u64,
    })
}

/// Sweep, select, enumerate on a single scorer.
pub fn run_search(scorer: &dyn Scorer, config: &SearchConfig) -> Result<SearchResult> {
    run_search_split(scorer, None, config)
}

/// Like [`run_search`], with phase 2 optionally scored by `eval_scorer`
/// (another split of the same feature space). When phase 2 sees different
/// images than phase 1, its baseline is scored separately.
pub fn run_search_split(
    scorer: &dyn Scorer,
    eval_scorer: Option<&dyn Scorer>,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let channels = scorer.channels();
    if let Some(eval) = eval_scorer {
        if eval.channels() != channels {
            return Err(Error::InvalidConfig(format!(
                "evaluation split has {} channels, search split has {channels}",
                eval.channels()
            )));
        }
    }

    let table = pair_sweep(scorer, config)?;
    let mut calls = CallLedger {
        baseline: 1,
        sweep: table.entries.len() as u64,
        combos: 0,
    };
    let top_n = select_top_n(&table, config.top_n);
    info!(
        "baseline {:.6}; top-{} deltas {:?}",
        table.baseline,
        top_n.len(),
        top_n.entries.iter().map(|e| e.delta).collect::<Vec<_>>()
    );

    let phase2 = eval_scorer.unwrap_or(scorer);
    let baseline = if eval_scorer.is_some() || config.eval_subset.is_some() {
        calls.baseline += 1;
        baseline_of(phase2, config.eval_subset.as_deref())?
    } else {
        table.baseline
    };
    let outcome = enumerate_combinations(phase2, &top_n, baseline, config)?;
    calls.combos = outcome.calls;
    info!(
        "best score {:.6} with {} edits after {} scorer calls",
        outcome.best_score,
        outcome.best_plan.len(),
        calls.total()
    );

    Ok(SearchResult {
        channels,
        baseline,
        best_plan: outcome.best_plan,
        best_score: outcome.best_score,
        per_size_best: outcome.per_size_best,
        scorer_calls: calls,
        table,
        top_n,
        seed: config.seed,
    })
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub i: usize,
    /// `None` for a zero edit.
    pub j: Option<usize>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEntry {
    pub k: usize,
    pub score: f64,
    pub plan: PlanFile,
}

/// JSON form of a [`SearchResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub baseline: f64,
    pub best_score: f64,
    pub best_plan: PlanFile,
    pub per_size: Vec<SizeEntry>,
    pub scorer_calls: CallLedger,
    pub top_n: Vec<TopEntry>,
    pub seed: u64,
}

impl SearchResult {
    pub fn report(&self) -> SearchReport {
        SearchReport {
            baseline: self.baseline,
            best_score: self.best_score,
            best_plan: self.best_plan.to_file(self.channels),
            per_size: self
                .per_size_best
                .iter()
                .map(|(&k, sp)| SizeEntry {
                    k,
                    score: sp.score,
                    plan: sp.plan.to_file(self.channels),
                })
                .collect(),
            scorer_calls: self.scorer_calls,
            top_n: self
                .top_n
                .entries
                .iter()
                .map(|e| TopEntry {
                    i: e.edit.channel(),
                    j: e.edit.donor(),
                    delta: e.delta,
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report()).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-size curve as CSV with columns `k,score`.
    pub fn per_size_csv(&self) -> String {
        let mut out = String::from("k,score\n");
        for (k, sp) in &self.per_size_best {
            let _ = writeln!(out, "{k},{}", sp.score);
        }
        out
    }

    pub fn nominal_calls(&self) -> u128 {
        nominal_call_count(self.channels, self.top_n.len())
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.per_size_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReportEntry {
    #[serde(flatten)]
    pub edit: ChannelEdit,
    pub delta: f64,
}

/// JSON form of a [`PairSweepTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub channels: usize,
    pub baseline: f64,
    pub entries: Vec<SweepReportEntry>,
    pub seed: u64,
}

impl PairSweepTable {
    pub fn report(&self, channels: usize, seed: u64) -> SweepReport {
        SweepReport {
            channels,
            baseline: self.baseline,
            entries: self
                .entries
                .iter()
                .map(|e| SweepReportEntry {
                    edit: e.edit,
                    delta: e.delta,
                })
                .collect(),
            seed,
        }
    }
}

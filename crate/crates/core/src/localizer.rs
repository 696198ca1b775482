//! Confidence-pruned binary hierarchical ablation search.
//!
//! Recursively splits a layer's candidate span, estimates slice flip rates
//! per node with a single group evaluation, prunes only when the one-sided
//! upper confidence bound on strength falls below threshold, and accepts
//! singletons on their point-estimate strength. Selectivity and catastrophic
//! flags are recorded on accepted singletons, never used to discard them.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{
    AgonistRecord, BaselineRegime, EffectsError, ExampleId, GroupEffect, NeuronCoord,
};
use crate::oracle::{BehaviorOracle, OracleError};
use crate::stats::{cp_lower, StatsError};

#[derive(Debug, thiserror::Error)]
pub enum LocalizerError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("evaluation subset must carry at least one example per slice")]
    EmptySubset,
    #[error("no candidates to search")]
    NoCandidates,
    #[error("tree-uniform confidence budget exhausted: spent {spent:.6} of {total:.6}")]
    BudgetExhausted { spent: f64, total: f64 },
    #[error("catastrophic detection requires the baseline-positive regime")]
    CatastrophicRegime,
    #[error("oracle failure at span [{start}, {end}) depth {depth}: {source}")]
    Node { start: usize, end: usize, depth: usize, source: OracleError },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Effects(#[from] EffectsError),
}

pub type LocalizerResult<T> = Result<T, LocalizerError>;

/// Confidence-budget schedule across the search tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Every node tests at the configured level (the empirical default).
    #[default]
    FixedPerNode,
    /// Children split the parent's budget in half.
    HalvingSpend,
    /// The total budget is divided uniformly over the full potential tree of
    /// 2N-1 nodes.
    TreeUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplePolicy {
    /// One compact evaluation subset reused across nodes.
    #[default]
    FixedSubset,
    /// A fresh seeded draw per node, approximating independent estimates.
    FreshPerNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatastrophicCheck {
    pub repeats: u32,
    pub tol: f64,
}

impl Default for CatastrophicCheck {
    fn default() -> Self {
        CatastrophicCheck { repeats: 3, tol: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub budget_mode: BudgetMode,
    pub samples_per_slice: usize,
    pub resample_policy: ResamplePolicy,
    /// Optional compute heuristic; pruning then requires UCB below this
    /// value, which must not exceed tau.
    pub search_epsilon: Option<f64>,
    /// Accept leaves only when the lower confidence bound clears tau, with a
    /// per-leaf Bonferroni correction over the candidate universe.
    pub strict_leaf_certification: bool,
    pub catastrophic_check: Option<CatastrophicCheck>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            tau: 0.2,
            epsilon: 0.2,
            alpha: 0.05,
            budget_mode: BudgetMode::FixedPerNode,
            samples_per_slice: 64,
            resample_policy: ResamplePolicy::FixedSubset,
            search_epsilon: None,
            strict_leaf_certification: false,
            catastrophic_check: Some(CatastrophicCheck::default()),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> LocalizerResult<()> {
        for (name, v) in [("tau", self.tau), ("epsilon", self.epsilon), ("alpha", self.alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(LocalizerError::InvalidConfig(format!(
                    "{name} = {v} outside (0, 1)"
                )));
            }
        }
        if self.samples_per_slice == 0 {
            return Err(LocalizerError::InvalidConfig("samples_per_slice is 0".into()));
        }
        if let Some(se) = self.search_epsilon {
            if se > self.tau {
                return Err(LocalizerError::InvalidConfig(format!(
                    "search_epsilon {se} must not exceed tau {} (it must stay conservative)",
                    self.tau
                )));
            }
        }
        Ok(())
    }
}

/// The compact evaluation subset for one circuit and regime, in the caller's
/// derived slicing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSubset {
    pub plus: Vec<ExampleId>,
    pub minus: Vec<ExampleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pruned,
    Split,
    AcceptedSingleton,
    RejectedSingleton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub span_start: usize,
    pub span_len: usize,
    pub depth: usize,
    pub alpha: f64,
    pub effect: GroupEffect,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Oracle group evaluations; equals the oracle counter delta for the run.
    pub group_evaluations: u64,
    pub nodes_visited: u64,
    pub nodes_pruned: u64,
    pub nodes_split: u64,
    pub accepted_singletons: u64,
    pub rejected_singletons: u64,
    pub catastrophic_checks: u64,
    pub per_depth_visited: Vec<u64>,
    pub per_depth_pruned: Vec<u64>,
    /// Wall time is measurement metadata, not part of reproducible payloads.
    #[serde(skip)]
    pub wall_time_ms: u128,
}

impl SearchStats {
    fn bump(histogram: &mut Vec<u64>, depth: usize) {
        if histogram.len() <= depth {
            histogram.resize(depth + 1, 0);
        }
        histogram[depth] += 1;
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub agonists: Vec<AgonistRecord>,
    pub stats: SearchStats,
    pub tree: Vec<SearchNode>,
}

/// Child confidence budgets for one split, under the given schedule.
pub fn allocate_budget(
    parent_alpha: f64,
    mode: BudgetMode,
    config_alpha: f64,
    universe: usize,
) -> (f64, f64) {
    match mode {
        BudgetMode::FixedPerNode => (config_alpha, config_alpha),
        BudgetMode::HalvingSpend => (parent_alpha / 2.0, parent_alpha / 2.0),
        BudgetMode::TreeUniform => {
            let node = config_alpha / (2 * universe - 1) as f64;
            (node, node)
        }
    }
}

fn root_alpha(mode: BudgetMode, config_alpha: f64, universe: usize) -> f64 {
    match mode {
        BudgetMode::FixedPerNode | BudgetMode::HalvingSpend => config_alpha,
        BudgetMode::TreeUniform => config_alpha / (2 * universe - 1) as f64,
    }
}

/// Tracks total confidence spent under tree-uniform budgeting.
#[derive(Debug, Clone)]
pub(crate) struct BudgetLedger {
    total: f64,
    spent: f64,
    enforced: bool,
}

impl BudgetLedger {
    fn new(mode: BudgetMode, total: f64) -> Self {
        BudgetLedger { total, spent: 0.0, enforced: mode == BudgetMode::TreeUniform }
    }

    pub(crate) fn spend(&mut self, amount: f64) -> LocalizerResult<()> {
        if !self.enforced {
            return Ok(());
        }
        self.spent += amount;
        if self.spent > self.total * (1.0 + 1e-9) {
            return Err(LocalizerError::BudgetExhausted { spent: self.spent, total: self.total });
        }
        Ok(())
    }

    #[cfg(test)]
    fn forced(total: f64) -> Self {
        BudgetLedger { total, spent: 0.0, enforced: true }
    }
}

struct SearchCtx<'a> {
    oracle: &'a dyn BehaviorOracle,
    candidates: &'a [NeuronCoord],
    subset: &'a EvalSubset,
    regime: BaselineRegime,
    cfg: &'a SearchConfig,
    tree: Vec<SearchNode>,
    stats: SearchStats,
    agonists: Vec<AgonistRecord>,
    ledger: BudgetLedger,
    node_counter: u64,
}

impl<'a> SearchCtx<'a> {
    fn node_examples(&mut self) -> (Vec<ExampleId>, Vec<ExampleId>) {
        let node_index = self.node_counter;
        self.node_counter += 1;
        let m_plus = self.cfg.samples_per_slice.min(self.subset.plus.len());
        let m_minus = self.cfg.samples_per_slice.min(self.subset.minus.len());
        match self.cfg.resample_policy {
            ResamplePolicy::FixedSubset => (
                self.subset.plus[..m_plus].to_vec(),
                self.subset.minus[..m_minus].to_vec(),
            ),
            ResamplePolicy::FreshPerNode => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::oracle::mix_seed(
                    self.cfg.seed,
                    0xf5e5 ^ node_index,
                ));
                let draw = |pool: &[ExampleId], m: usize, rng: &mut ChaCha8Rng| {
                    let mut v = pool.to_vec();
                    v.shuffle(rng);
                    v.truncate(m);
                    v
                };
                (
                    draw(&self.subset.plus, m_plus, &mut rng),
                    draw(&self.subset.minus, m_minus, &mut rng),
                )
            }
        }
    }

    fn measure(
        &mut self,
        start: usize,
        len: usize,
        depth: usize,
        alpha: f64,
    ) -> LocalizerResult<GroupEffect> {
        self.ledger.spend(alpha)?;
        let (plus, minus) = self.node_examples();
        let out = self
            .oracle
            .query_pair(&self.candidates[start..start + len], self.regime, &plus, &minus)
            .map_err(|source| LocalizerError::Node { start, end: start + len, depth, source })?;
        self.stats.group_evaluations += 1;
        let b = self.regime.label();
        let flips = |outs: &[bool]| outs.iter().filter(|&&o| o != b).count() as u64;
        Ok(GroupEffect::from_counts(
            flips(&out.plus),
            plus.len() as u64,
            flips(&out.minus),
            minus.len() as u64,
            alpha,
        )?)
    }

    fn search(&mut self, start: usize, len: usize, depth: usize, alpha: f64) -> LocalizerResult<()> {
        let effect = self.measure(start, len, depth, alpha)?;
        self.stats.nodes_visited += 1;
        SearchStats::bump(&mut self.stats.per_depth_visited, depth);

        let prune_threshold = self.cfg.search_epsilon.unwrap_or(self.cfg.tau);
        let verdict = if effect.ucb_strength() < prune_threshold {
            self.stats.nodes_pruned += 1;
            SearchStats::bump(&mut self.stats.per_depth_pruned, depth);
            Verdict::Pruned
        } else if len == 1 {
            let accepted = if self.cfg.strict_leaf_certification {
                // per-leaf Bonferroni over the candidate universe, split
                // across the two slices
                let level = self.cfg.alpha / self.candidates.len() as f64 / 2.0;
                let lcb = cp_lower(effect.flips_plus(), effect.n_plus, level)?
                    .max(cp_lower(effect.flips_minus(), effect.n_minus, level)?);
                lcb >= self.cfg.tau
            } else {
                effect.strength() >= self.cfg.tau
            };
            if accepted {
                let mut record = AgonistRecord::new(
                    self.candidates[start],
                    self.regime,
                    effect,
                    self.cfg.epsilon,
                );
                if self.regime == BaselineRegime::Positive && !record.selective {
                    if let Some(check) = self.cfg.catastrophic_check {
                        let (plus, minus) = (
                            &self.subset.plus[..self.cfg.samples_per_slice.min(self.subset.plus.len())],
                            &self.subset.minus[..self.cfg.samples_per_slice.min(self.subset.minus.len())],
                        );
                        self.stats.catastrophic_checks += 1;
                        self.stats.group_evaluations += check.repeats as u64;
                        if detect_catastrophic(
                            self.candidates[start],
                            self.oracle,
                            plus,
                            minus,
                            self.regime,
                            check.repeats,
                            check.tol,
                        )? {
                            record.mark_catastrophic(self.cfg.tau);
                        }
                    }
                }
                self.agonists.push(record);
                self.stats.accepted_singletons += 1;
                Verdict::AcceptedSingleton
            } else {
                self.stats.rejected_singletons += 1;
                Verdict::RejectedSingleton
            }
        } else {
            Verdict::Split
        };

        self.tree.push(SearchNode {
            span_start: start,
            span_len: len,
            depth,
            alpha,
            effect,
            verdict,
        });

        if verdict == Verdict::Split {
            self.stats.nodes_split += 1;
            let left = len.div_ceil(2);
            let (a_left, a_right) =
                allocate_budget(alpha, self.cfg.budget_mode, self.cfg.alpha, self.candidates.len());
            self.search(start, left, depth + 1, a_left)?;
            self.search(start + left, len - left, depth + 1, a_right)?;
        }
        Ok(())
    }
}

/// Run the hierarchical search over one layer's candidate sequence.
///
/// Returns accepted singletons sorted by coordinate, cost statistics, and the
/// full decision tree in pre-order.
pub fn cha_search(
    layer_candidates: &[NeuronCoord],
    oracle: &dyn BehaviorOracle,
    subset: &EvalSubset,
    regime: BaselineRegime,
    cfg: &SearchConfig,
) -> LocalizerResult<SearchOutcome> {
    cfg.validate()?;
    if layer_candidates.is_empty() {
        return Err(LocalizerError::NoCandidates);
    }
    if subset.plus.is_empty() || subset.minus.is_empty() {
        return Err(LocalizerError::EmptySubset);
    }
    let started = Instant::now();
    let mut ctx = SearchCtx {
        oracle,
        candidates: layer_candidates,
        subset,
        regime,
        cfg,
        tree: Vec::new(),
        stats: SearchStats::default(),
        agonists: Vec::new(),
        ledger: BudgetLedger::new(cfg.budget_mode, cfg.alpha),
        node_counter: 0,
    };
    let alpha0 = root_alpha(cfg.budget_mode, cfg.alpha, layer_candidates.len());
    ctx.search(0, layer_candidates.len(), 0, alpha0)?;
    let mut agonists = ctx.agonists;
    agonists.sort_by_key(|r| r.neuron);
    let mut stats = ctx.stats;
    stats.wall_time_ms = started.elapsed().as_millis();
    Ok(SearchOutcome { agonists, stats, tree: ctx.tree })
}

/// Always-catastrophic heuristic for the baseline-positive regime: true iff
/// every one of `repeats` independent evaluations leaves post-ablation
/// accuracy at or below `tol` on both slices.
pub fn detect_catastrophic(
    neuron: NeuronCoord,
    oracle: &dyn BehaviorOracle,
    plus: &[ExampleId],
    minus: &[ExampleId],
    regime: BaselineRegime,
    repeats: u32,
    tol: f64,
) -> LocalizerResult<bool> {
    if regime != BaselineRegime::Positive {
        return Err(LocalizerError::CatastrophicRegime);
    }
    for _ in 0..repeats {
        let out = oracle.query_pair(&[neuron], regime, plus, minus)?;
        let accuracy = |outs: &[bool]| {
            outs.iter().filter(|&&o| o).count() as f64 / outs.len().max(1) as f64
        };
        if accuracy(&out.plus) > tol || accuracy(&out.minus) > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One JSON record per tree node.
pub fn write_tree_jsonl<W: std::io::Write>(
    tree: &[SearchNode],
    mut out: W,
) -> std::io::Result<()> {
    for node in tree {
        let line = serde_json::to_string(node).expect("node serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Agonist records as CSV.
pub fn write_agonists_csv<W: std::io::Write>(
    records: &[AgonistRecord],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "neuron",
        "regime",
        "delta_plus",
        "delta_minus",
        "strength",
        "selectivity",
        "catastrophic",
        "selective",
    ])?;
    for r in records {
        w.write_record([
            r.neuron.to_string(),
            r.regime.to_string(),
            format!("{}", r.effect.delta_plus),
            format!("{}", r.effect.delta_minus),
            format!("{}", r.effect.strength()),
            format!("{}", r.effect.selectivity_abs()),
            r.catastrophic.to_string(),
            r.selective.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{plant_task, PlantRegimes, PlantSpec, SyntheticOracle};

    fn full_subset(oracle: &SyntheticOracle, regime: BaselineRegime) -> EvalSubset {
        EvalSubset {
            plus: oracle.task().examples(regime, crate::effects::SliceTag::Associated),
            minus: oracle.task().examples(regime, crate::effects::SliceTag::Unrelated),
        }
    }

    fn exact_config() -> SearchConfig {
        SearchConfig { samples_per_slice: 64, ..SearchConfig::default() }
    }

    #[test]
    fn budget_allocation_examples() {
        assert_eq!(allocate_budget(0.05, BudgetMode::HalvingSpend, 0.05, 64), (0.025, 0.025));
        assert_eq!(allocate_budget(0.05, BudgetMode::FixedPerNode, 0.05, 64), (0.05, 0.05));
        let (l, r) = allocate_budget(0.05, BudgetMode::TreeUniform, 0.05, 64);
        assert!((l - 0.05 / 127.0).abs() < 1e-12);
        assert_eq!(l, r);
        assert!((l - 3.94e-4).abs() < 1e-5);
    }

    #[test]
    fn budget_ledger_exhaustion_errors() {
        let mut ledger = BudgetLedger::forced(0.05);
        for _ in 0..127 {
            ledger.spend(0.05 / 127.0).unwrap();
        }
        let err = ledger.spend(0.05 / 127.0).unwrap_err();
        assert!(matches!(err, LocalizerError::BudgetExhausted { .. }));
    }

    #[test]
    fn single_planted_candidate_is_accepted() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![1],
            agonist_strengths: vec![0.5],
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 2,
            ..PlantSpec::default()
        })
        .unwrap();
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let out = cha_search(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &subset,
            BaselineRegime::Positive,
            &exact_config(),
        )
        .unwrap();
        assert_eq!(out.agonists.len(), 1);
        assert_eq!(out.tree[0].verdict, Verdict::AcceptedSingleton);
        assert!((out.agonists[0].effect.strength() - 0.5).abs() < 1e-9);
        assert!(out.agonists[0].selective);
    }

    #[test]
    fn background_only_layer_prunes_at_root_with_one_evaluation() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![64],
            agonist_strengths: vec![],
            background_cap: 0.05,
            background_density: 0.3,
            background_pool: Some(0.05),
            plant_in: PlantRegimes::PositiveOnly,
            seed: 4,
            ..PlantSpec::default()
        })
        .unwrap();
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let before = oracle.query_count();
        let out = cha_search(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &subset,
            BaselineRegime::Positive,
            &exact_config(),
        )
        .unwrap();
        // exact full-subset rates: root union is within the 0.05 pool, so
        // ucb = cp_upper(x<=3, 64, 0.025) < 0.2 and the root prunes
        assert_eq!(out.tree.len(), 1);
        assert_eq!(out.tree[0].verdict, Verdict::Pruned);
        assert_eq!(out.stats.group_evaluations, 1);
        assert_eq!(oracle.query_count() - before, out.stats.group_evaluations);
        assert!(out.agonists.is_empty());
    }

    #[test]
    fn planted_agonists_recovered_within_cost_bound() {
        // N = 4096 spread over 8 layers' worth of channels in one searched
        // sequence; k = 8 planted, exact separated oracle
        let k = 8;
        let spec = PlantSpec {
            layer_widths: vec![4096],
            agonist_strengths: vec![0.5; k],
            overlap: 0.0,
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 7,
            ..PlantSpec::default()
        };
        let task = plant_task(&spec).unwrap();
        let truth: Vec<NeuronCoord> = task
            .ground_truth_agonists(0.2, BaselineRegime::Positive)
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let before = oracle.query_count();
        let out = cha_search(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &subset,
            BaselineRegime::Positive,
            &exact_config(),
        )
        .unwrap();
        let found: Vec<NeuronCoord> = out.agonists.iter().map(|r| r.neuron).collect();
        assert_eq!(found, truth, "all planted agonists recovered in order");
        let n = 4096f64;
        let bound = 2.0 * k as f64 * ((n / k as f64).log2() + 2.0) + 1.0;
        assert!(
            (out.stats.group_evaluations as f64) <= bound,
            "{} evaluations exceed bound {bound}",
            out.stats.group_evaluations
        );
        assert!(out.stats.group_evaluations < 4096);
        assert_eq!(oracle.query_count() - before, out.stats.group_evaluations);
    }

    #[test]
    fn determinism_across_runs() {
        let spec = PlantSpec {
            layer_widths: vec![128],
            agonist_strengths: vec![0.5, 0.35, 0.25],
            noise_plus: 0.03,
            noise_minus: 0.03,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 11,
            ..PlantSpec::default()
        };
        let run = || {
            let oracle = SyntheticOracle::new(plant_task(&spec).unwrap());
            let subset = full_subset(&oracle, BaselineRegime::Positive);
            cha_search(
                &oracle.candidate_universe()[0].clone(),
                &oracle,
                &subset,
                BaselineRegime::Positive,
                &exact_config(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.agonists, b.agonists);
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.stats.group_evaluations, b.stats.group_evaluations);
    }

    #[test]
    fn antagonist_does_not_mask_sibling_agonists() {
        let base = PlantSpec {
            layer_widths: vec![256],
            agonist_strengths: vec![0.5, 0.4, 0.35, 0.3],
            overlap: 0.0,
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 13,
            ..PlantSpec::default()
        };
        let run = |antagonists: usize| {
            let task = plant_task(&PlantSpec { antagonists, ..base.clone() }).unwrap();
            let planted: Vec<NeuronCoord> = task
                .planted_agonists(BaselineRegime::Positive)
                .iter()
                .map(|p| p.coord)
                .collect();
            let oracle = SyntheticOracle::new(task);
            let subset = full_subset(&oracle, BaselineRegime::Positive);
            let out = cha_search(
                &oracle.candidate_universe()[0].clone(),
                &oracle,
                &subset,
                BaselineRegime::Positive,
                &exact_config(),
            )
            .unwrap();
            let found: Vec<NeuronCoord> = out.agonists.iter().map(|r| r.neuron).collect();
            planted.iter().filter(|c| found.contains(c)).count()
        };
        // planting one catastrophic antagonist must not reduce agonist recall
        assert_eq!(run(0), 4);
        assert_eq!(run(1), 4);
    }

    #[test]
    fn catastrophic_flagging_on_accepted_antagonist() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![32],
            agonist_strengths: vec![],
            antagonists: 1,
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 17,
            ..PlantSpec::default()
        })
        .unwrap();
        let ant = task.planted_antagonists(BaselineRegime::Positive)[0].coord;
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let out = cha_search(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &subset,
            BaselineRegime::Positive,
            &exact_config(),
        )
        .unwrap();
        let record = out.agonists.iter().find(|r| r.neuron == ant).unwrap();
        assert!(record.catastrophic);
        assert!(!record.selective);
        assert!(out.stats.catastrophic_checks > 0);
    }

    #[test]
    fn selective_agonist_is_not_flagged() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![16],
            agonist_strengths: vec![0.5],
            agonist_minus_rate: 0.1,
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 19,
            ..PlantSpec::default()
        })
        .unwrap();
        let coord = task.planted_agonists(BaselineRegime::Positive)[0].coord;
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let plus = &subset.plus[..];
        let minus = &subset.minus[..];
        // delta- = 0.1 keeps unrelated accuracy high, so not catastrophic
        assert!(!detect_catastrophic(coord, &oracle, plus, minus, BaselineRegime::Positive, 3, 0.05)
            .unwrap());
        let err =
            detect_catastrophic(coord, &oracle, plus, minus, BaselineRegime::Negative, 3, 0.05)
                .unwrap_err();
        assert!(matches!(err, LocalizerError::CatastrophicRegime));
    }

    #[test]
    fn detect_catastrophic_rate_matches_binomial_product() {
        // neuron with true both-slice accuracy 0.03: under 64 samples and
        // tol 0.05, each repeat passes iff both slices show <= 3 non-flips
        let spec = PlantSpec {
            layer_widths: vec![4],
            examples_per_slice: 100,
            agonist_strengths: vec![],
            antagonists: 0,
            background_density: 0.0,
            noise_plus: 0.03,
            noise_minus: 0.03,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 23,
            ..PlantSpec::default()
        };
        // use an antagonist so the pre-noise outcome is always flipped; the
        // 3% noise then restores accuracy 0.03 on both slices
        let spec = PlantSpec { antagonists: 1, ..spec };
        let tol = 0.05;
        let repeats = 3;
        let samples = 64usize;
        // exact per-repeat pass probability: P[Bin(64, 0.03) <= floor(0.05*64)]
        let pass_one = crate::stats::test_oracles::binomial_tail_direct(
            (tol * samples as f64).floor() as u64,
            samples as u64,
            0.03,
        );
        let expect = pass_one.powi(2 * repeats as i32);
        let mut hits = 0u32;
        let seeds = 500;
        for seed in 0..seeds {
            let task = plant_task(&PlantSpec { seed, ..spec.clone() }).unwrap();
            let ant = task.planted_antagonists(BaselineRegime::Positive)[0].coord;
            let oracle = SyntheticOracle::new(task);
            let subset = full_subset(&oracle, BaselineRegime::Positive);
            if detect_catastrophic(
                ant,
                &oracle,
                &subset.plus[..samples],
                &subset.minus[..samples],
                BaselineRegime::Positive,
                repeats,
                tol,
            )
            .unwrap()
            {
                hits += 1;
            }
        }
        let rate = hits as f64 / seeds as f64;
        assert!(
            (rate - expect).abs() <= 0.05,
            "empirical {rate} vs exact {expect}"
        );
    }

    #[test]
    fn search_epsilon_must_stay_conservative() {
        let cfg = SearchConfig { search_epsilon: Some(0.5), tau: 0.2, ..SearchConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = SearchConfig { search_epsilon: Some(0.1), tau: 0.2, ..SearchConfig::default() };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn exports_have_expected_shape() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![8],
            agonist_strengths: vec![0.5],
            plant_in: PlantRegimes::PositiveOnly,
            seed: 29,
            ..PlantSpec::default()
        })
        .unwrap();
        let oracle = SyntheticOracle::new(task);
        let subset = full_subset(&oracle, BaselineRegime::Positive);
        let out = cha_search(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &subset,
            BaselineRegime::Positive,
            &exact_config(),
        )
        .unwrap();
        let mut jsonl = Vec::new();
        write_tree_jsonl(&out.tree, &mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        assert_eq!(text.lines().count(), out.tree.len());
        assert!(text.contains("\"verdict\""));

        let mut csv_bytes = Vec::new();
        write_agonists_csv(&out.agonists, &mut csv_bytes).unwrap();
        let text = String::from_utf8(csv_bytes).unwrap();
        assert!(text.starts_with("neuron,regime,"));
        assert_eq!(text.lines().count(), 1 + out.agonists.len());
    }
}

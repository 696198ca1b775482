//! Stage functions shared by the experiment families: predicate-matrix
//! synthesis, splitter extraction, slice derivation, coverage planning,
//! per-layer localization, and anchoring.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{ground_truth_reducer, ig_rank_task, retain_top, CandidatesError, Retention};
use crate::coverage::{
    build_random_plan, build_spectral_plan, embed_task_regime, greedy_k_center, pca_embed,
    CoverageError, CoveragePlan, EmbedConfig, KCenterInit, PlanKind,
};
use crate::effects::{AgonistRecord, BaselineRegime, ExampleId, NeuronCoord, SliceTag};
use crate::harness::config::{derive_seed, RunConfig, ScorerKind};
use crate::localizer::{cha_search, EvalSubset, LocalizerError, SearchNode, SearchStats};
use crate::oracle::{
    plant_task, BehaviorOracle, OracleError, PlantedRole, SyntheticOracle, SyntheticTask,
};
use crate::rules::{
    anchor_rule, enumerate_clauses, fake_rule_control, flip_targets, gate_eligible,
    greedy_or_compose, induce_split, AnchorConfig, AnchorOutcome, Column, ColumnData,
    PredicateMatrix, Provenance, RuleRole, RuleSet, RulesError, Split,
};
use crate::stats::StatsError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error(transparent)]
    Candidates(#[from] CandidatesError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type PipelineResult<T> = Result<T, PipelineError>;

pub(crate) fn stage_err(stage: &'static str, message: impl Into<String>) -> PipelineError {
    PipelineError::Stage { stage, message: message.into() }
}

/// One planted task plus everything derived from it that is shared across
/// conditions: predicate matrix, mechanism labels, baseline labels, and
/// per-regime embeddings.
pub struct TaskBundle {
    pub task: SyntheticTask,
    pub matrix: PredicateMatrix,
    /// Mechanism labels: whether the example sits in the planted associated
    /// slice. These are the splitter-extraction targets.
    pub labels: Vec<bool>,
    /// Baseline labels per matrix row (true = regime positive).
    pub baseline_labels: Vec<bool>,
    pub embeddings: BTreeMap<BaselineRegime, crate::coverage::EmbeddingMatrix>,
}

/// Plant the task and synthesize the shared stage inputs.
pub fn build_bundle(cfg: &RunConfig, task_salt: &str) -> PipelineResult<TaskBundle> {
    let spec = cfg.seeded_task(task_salt);
    bundle_from_task(plant_task(&spec)?, cfg)
}

/// Derive the shared stage inputs from an already-planted task (for stages
/// rerun from a persisted manifest).
pub fn bundle_from_task(task: SyntheticTask, cfg: &RunConfig) -> PipelineResult<TaskBundle> {
    let (matrix, labels, baseline_labels) = synthesize_matrix(&task, cfg)?;
    let mut embeddings = BTreeMap::new();
    for regime in BaselineRegime::both() {
        embeddings.insert(
            regime,
            embed_task_regime(
                &task,
                regime,
                &EmbedConfig {
                    dim: cfg.coverage.embed_dim,
                    noise: cfg.coverage.embed_noise,
                    seed: derive_seed(cfg.master_seed, "embed"),
                },
            ),
        );
    }
    Ok(TaskBundle { task, matrix, labels, baseline_labels, embeddings })
}

/// Build the predicate matrix for a planted task: a seed slice-marker
/// column, optional per-agonist trigger columns whose fired sets equal the
/// planted flip sets, informative real columns, noise columns, and one
/// output-derived diagnostic column. Splits are stratified by k-center
/// clusters in predicate space.
pub fn synthesize_matrix(
    task: &SyntheticTask,
    cfg: &RunConfig,
) -> PipelineResult<(PredicateMatrix, Vec<bool>, Vec<bool>)> {
    let seed = derive_seed(cfg.master_seed, "matrix");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<ExampleId> = task.regime_examples(BaselineRegime::Positive);
    ids.extend(task.regime_examples(BaselineRegime::Negative));

    let labels: Vec<bool> = ids
        .iter()
        .map(|&id| task.planted_slice_of(id).expect("task id") == SliceTag::Associated)
        .collect();
    let baseline_labels: Vec<bool> = ids
        .iter()
        .map(|&id| task.regime_of(id).expect("task id") == BaselineRegime::Positive)
        .collect();

    let mut columns = Vec::new();
    columns.push(Column {
        name: "slice_marker".into(),
        data: ColumnData::Bool(labels.clone()),
        provenance: Provenance::Seed,
        prompt_observable: true,
    });

    if cfg.matrix.plantable {
        let mut coords: Vec<NeuronCoord> = task
            .planted()
            .iter()
            .filter(|p| p.role == PlantedRole::Agonist)
            .map(|p| p.coord)
            .collect();
        coords.sort();
        coords.dedup();
        for coord in coords {
            let fired: Vec<bool> = ids
                .iter()
                .map(|&id| task.flips_example(coord, id).unwrap_or(false))
                .collect();
            columns.push(Column {
                name: format!("trigger_m{}_{}", coord.layer, coord.channel),
                data: ColumnData::Bool(fired),
                provenance: Provenance::Proposed,
                prompt_observable: true,
            });
        }
    }

    let signal: Vec<f64> = labels
        .iter()
        .map(|&l| 2.0 * l as u8 as f64 + rng.gen_range(-cfg.matrix.signal_noise..cfg.matrix.signal_noise))
        .collect();
    columns.push(Column {
        name: "signal_score".into(),
        data: ColumnData::Real(signal),
        provenance: Provenance::Proposed,
        prompt_observable: true,
    });

    let lengths: Vec<f64> = ids
        .iter()
        .map(|_| 40.0 + rng.gen_range(-8.0..8.0))
        .collect();
    columns.push(Column {
        name: "length_chars".into(),
        data: ColumnData::Real(lengths),
        provenance: Provenance::Seed,
        prompt_observable: true,
    });

    // output-derived diagnostic column; gate-ineligible by construction
    let margin: Vec<f64> = baseline_labels
        .iter()
        .map(|&b| if b { 0.8 } else { 0.2 } + rng.gen_range(-0.1..0.1))
        .collect();
    columns.push(Column {
        name: "baseline_margin".into(),
        data: ColumnData::Real(margin),
        provenance: Provenance::Proposed,
        prompt_observable: false,
    });

    for i in 0..cfg.matrix.noise_columns {
        let noise: Vec<bool> = ids.iter().map(|_| rng.gen_bool(0.5)).collect();
        columns.push(Column {
            name: format!("noise_{i}"),
            data: ColumnData::Bool(noise),
            provenance: Provenance::Proposed,
            prompt_observable: true,
        });
    }

    let mut matrix = PredicateMatrix::new(ids, columns)?;
    matrix.assign_splits_stratified(
        cfg.rules.split_fractions,
        cfg.rules.stratify_clusters,
        derive_seed(cfg.master_seed, "splits"),
    )?;
    Ok((matrix, labels, baseline_labels))
}

/// Score and filter the predicate columns against the mechanism labels on
/// non-test rows, returning the extraction matrix restricted to retained
/// columns. With the stage disabled, every column is kept. Anchoring always
/// sees the full vocabulary; the filter curates the splitter's inputs.
pub fn extraction_matrix_for(
    bundle: &TaskBundle,
    cfg: &RunConfig,
) -> PipelineResult<(PredicateMatrix, Option<crate::stats::FilterReport>)> {
    if !cfg.stages.features {
        return Ok((bundle.matrix.clone(), None));
    }
    let visible: Vec<usize> = (0..bundle.matrix.n())
        .filter(|&r| bundle.matrix.splits()[r] != Split::Test)
        .collect();
    let columns: Vec<Vec<f64>> = (0..bundle.matrix.columns().len())
        .map(|c| {
            let full = bundle.matrix.column_as_real(c);
            visible.iter().map(|&r| full[r]).collect()
        })
        .collect();
    let labels: Vec<bool> = visible.iter().map(|&r| bundle.labels[r]).collect();
    let report = crate::stats::filter_features(&columns, &labels, &cfg.features)?;
    let matrix = bundle.matrix.retain_columns(&report.retained)?;
    Ok((matrix, Some(report)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitterOutcome {
    pub circuit_id: String,
    pub rule: RuleSet,
    pub validation_mcc: f64,
}

/// Extract up to `k_splitters` splitter rules by greedy MCC OR-composition,
/// ranked by held-out MCC with ties broken toward fewer clauses.
pub fn extract_splitters(
    matrix: &PredicateMatrix,
    labels: &[bool],
    cfg: &RunConfig,
    fake_seed: Option<u64>,
) -> PipelineResult<Vec<SplitterOutcome>> {
    let extraction_labels: Vec<bool> = match fake_seed {
        Some(seed) => fake_rule_control(labels, seed),
        None => labels.to_vec(),
    };
    let train = matrix.rows_in(Split::Train);
    let val = matrix.rows_in(Split::Validation);
    let pool = enumerate_clauses(matrix, &extraction_labels, &train, &cfg.rules.enumeration)?;

    let role = if fake_seed.is_some() { RuleRole::FakeControl } else { RuleRole::Splitter };
    let mut outcomes: Vec<SplitterOutcome> = Vec::new();
    let mut banned: Vec<crate::rules::RuleClause> = Vec::new();
    for i in 0..cfg.rules.k_splitters {
        let remaining: Vec<_> = pool
            .clauses
            .iter()
            .filter(|sc| !banned.contains(&sc.clause))
            .cloned()
            .collect();
        if remaining.is_empty() {
            break;
        }
        let sub_pool = crate::rules::ClausePool { clauses: remaining };
        let mut rule = greedy_or_compose(
            &sub_pool,
            matrix,
            &extraction_labels,
            &val,
            cfg.rules.seed_k,
            role,
        )?;
        rule.gate_eligible = Some(gate_eligible(&rule, matrix));
        banned.push(rule.clauses[0].clone());
        let validation_mcc = rule.scores["validation"].mcc;
        outcomes.push(SplitterOutcome { circuit_id: format!("c{i}"), rule, validation_mcc });
    }
    outcomes.sort_by(|a, b| {
        b.validation_mcc
            .partial_cmp(&a.validation_mcc)
            .unwrap()
            .then(a.rule.clauses.len().cmp(&b.rule.clauses.len()))
            .then(a.circuit_id.cmp(&b.circuit_id))
    });
    Ok(outcomes)
}

/// How the associated/unrelated slices are derived within a regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitCondition {
    Rule,
    FakeRule,
    SpectralOnly,
}

/// Derived slices for one regime. Under the spectral-only condition the
/// slices are the two k-center clusters of the regime embedding (the first
/// center's cluster plays the associated role).
pub fn derive_slices(
    condition: SplitCondition,
    splitter: Option<&RuleSet>,
    bundle: &TaskBundle,
    regime: BaselineRegime,
    d_pca: usize,
) -> PipelineResult<(Vec<ExampleId>, Vec<ExampleId>)> {
    match condition {
        SplitCondition::Rule | SplitCondition::FakeRule => {
            let rule = splitter
                .ok_or_else(|| stage_err("derive-slices", "rule condition without a splitter"))?;
            Ok(induce_split(rule, &bundle.matrix, &bundle.baseline_labels, regime)?)
        }
        SplitCondition::SpectralOnly => {
            let embedding = &bundle.embeddings[&regime];
            let d = d_pca.min(embedding.rows.len() - 1).min(embedding.rows[0].len()).max(1);
            let pca = pca_embed(embedding, d)?;
            let kc = greedy_k_center(&pca.rows, 2.min(pca.rows.len()), KCenterInit::FarthestFromMean)?;
            let mut plus = Vec::new();
            let mut minus = Vec::new();
            for (i, &id) in embedding.ids.iter().enumerate() {
                if kc.assignment[i] == 0 {
                    plus.push(id);
                } else {
                    minus.push(id);
                }
            }
            Ok((plus, minus))
        }
    }
}

/// Candidate retention honoring the stage toggle: disabled reduction leaves
/// the whole universe searchable.
pub fn retention_for(cfg: &RunConfig, task: &SyntheticTask) -> PipelineResult<Retention> {
    if !cfg.stages.reduce {
        let per_layer: Vec<(u16, Vec<NeuronCoord>)> = task
            .universe()
            .iter()
            .enumerate()
            .map(|(layer, coords)| (layer as u16, coords.clone()))
            .collect();
        let realized = per_layer.iter().map(|(_, c)| c.len()).sum();
        return Ok(Retention { per_layer, realized });
    }
    match cfg.candidates.scorer {
        ScorerKind::GroundTruth { leak_rate } => Ok(ground_truth_reducer(
            task,
            cfg.candidates.budget,
            leak_rate,
            derive_seed(cfg.master_seed, "reduce"),
        )?
        .retention),
        ScorerKind::IgSurrogate { pairs, steps } => {
            let ranking = ig_rank_task(
                task,
                BaselineRegime::Positive,
                pairs,
                steps,
                derive_seed(cfg.master_seed, "reduce"),
            )?;
            Ok(retain_top(&ranking, cfg.candidates.budget, &|_| true)?)
        }
    }
}

/// Coverage plan for one regime's derived slices.
pub fn build_plan(
    kind: PlanKind,
    bundle: &TaskBundle,
    regime: BaselineRegime,
    plus: &[ExampleId],
    minus: &[ExampleId],
    cfg: &RunConfig,
    seed_salt: &str,
) -> PipelineResult<CoveragePlan> {
    let embedding = &bundle.embeddings[&regime];
    let seed = derive_seed(cfg.master_seed, seed_salt);
    let plan = match kind {
        PlanKind::Spectral => build_spectral_plan(embedding, plus, minus, &cfg.coverage.plan, seed)?,
        PlanKind::Random => build_random_plan(embedding, plus, minus, &cfg.coverage.plan, seed)?,
    };
    Ok(plan)
}

/// A tree node tagged with the layer it was searched in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub layer: u16,
    #[serde(flatten)]
    pub node: SearchNode,
}

#[derive(Debug, Clone, Default)]
pub struct MergedSearch {
    pub agonists: Vec<AgonistRecord>,
    pub stats: SearchStats,
    pub tree: Vec<LayerNode>,
}

/// Run the hierarchical search layer by layer over the retained candidates.
pub fn localize(
    oracle: &dyn BehaviorOracle,
    retention: &Retention,
    plan: &CoveragePlan,
    regime: BaselineRegime,
    cfg: &RunConfig,
    search_salt: &str,
) -> PipelineResult<MergedSearch> {
    let subset = EvalSubset {
        plus: plan.selected_plus.clone(),
        minus: plan.selected_minus.clone(),
    };
    let search_cfg = cfg.seeded_search(search_salt);
    let mut merged = MergedSearch::default();
    for (layer, coords) in &retention.per_layer {
        if coords.is_empty() {
            continue;
        }
        let outcome = cha_search(coords, oracle, &subset, regime, &search_cfg)?;
        merged.agonists.extend(outcome.agonists);
        merged.stats.group_evaluations += outcome.stats.group_evaluations;
        merged.stats.nodes_visited += outcome.stats.nodes_visited;
        merged.stats.nodes_pruned += outcome.stats.nodes_pruned;
        merged.stats.nodes_split += outcome.stats.nodes_split;
        merged.stats.accepted_singletons += outcome.stats.accepted_singletons;
        merged.stats.rejected_singletons += outcome.stats.rejected_singletons;
        merged.stats.catastrophic_checks += outcome.stats.catastrophic_checks;
        merged.stats.wall_time_ms += outcome.stats.wall_time_ms;
        for (depth, &count) in outcome.stats.per_depth_visited.iter().enumerate() {
            if merged.stats.per_depth_visited.len() <= depth {
                merged.stats.per_depth_visited.resize(depth + 1, 0);
            }
            merged.stats.per_depth_visited[depth] += count;
        }
        for (depth, &count) in outcome.stats.per_depth_pruned.iter().enumerate() {
            if merged.stats.per_depth_pruned.len() <= depth {
                merged.stats.per_depth_pruned.resize(depth + 1, 0);
            }
            merged.stats.per_depth_pruned[depth] += count;
        }
        merged
            .tree
            .extend(outcome.tree.into_iter().map(|node| LayerNode { layer: *layer, node }));
    }
    merged.agonists.sort_by_key(|r| r.neuron);
    Ok(merged)
}

/// Anchor every accepted singleton against the plan's evaluation examples.
pub fn anchor_neurons(
    oracle: &dyn BehaviorOracle,
    matrix: &PredicateMatrix,
    agonists: &[AgonistRecord],
    plan: &CoveragePlan,
    regime: BaselineRegime,
    cfg: &AnchorConfig,
) -> PipelineResult<Vec<AnchorOutcome>> {
    let mut examples: Vec<ExampleId> = plan
        .selected_plus
        .iter()
        .chain(plan.selected_minus.iter())
        .copied()
        .collect();
    examples.sort();
    examples.dedup();
    let mut outcomes = Vec::new();
    for record in agonists {
        let targets_vec = flip_targets(record.neuron, oracle, &examples, regime)?;
        let targets: BTreeMap<ExampleId, bool> =
            examples.iter().copied().zip(targets_vec).collect();
        let mut outcome = anchor_rule(record.neuron, &targets, matrix, regime, cfg)?;
        if let Some(rule) = &mut outcome.rule {
            rule.gate_eligible = Some(gate_eligible(rule, matrix));
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Count anchors whose held-out MCC clears `threshold`.
pub fn hq_count_at(anchors: &[AnchorOutcome], threshold: f64) -> u64 {
    anchors
        .iter()
        .filter(|a| a.test_mcc.map(|m| m >= threshold).unwrap_or(false))
        .count() as u64
}

/// Fraction of the given examples flipped by ablating the whole set at once
/// (one group evaluation).
pub fn union_coverage(
    oracle: &dyn BehaviorOracle,
    neurons: &[NeuronCoord],
    regime: BaselineRegime,
    examples: &[ExampleId],
) -> PipelineResult<f64> {
    if examples.is_empty() || neurons.is_empty() {
        return Ok(0.0);
    }
    let out = oracle.query_pair(neurons, regime, examples, &[])?;
    let b = regime.label();
    Ok(out.plus.iter().filter(|&&o| o != b).count() as f64 / examples.len() as f64)
}

/// Per-neuron individual and incremental union coverage, in decreasing
/// individual-coverage order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageIncrement {
    pub neuron: NeuronCoord,
    pub individual: f64,
    pub incremental: f64,
}

pub fn incremental_coverage(
    oracle: &dyn BehaviorOracle,
    neurons: &[NeuronCoord],
    regime: BaselineRegime,
    examples: &[ExampleId],
) -> PipelineResult<Vec<CoverageIncrement>> {
    let mut individual: Vec<(NeuronCoord, f64)> = Vec::new();
    for &n in neurons {
        individual.push((n, union_coverage(oracle, &[n], regime, examples)?));
    }
    individual.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let mut prefix: Vec<NeuronCoord> = Vec::new();
    let mut covered = 0.0;
    for (neuron, ind) in individual {
        prefix.push(neuron);
        let union = union_coverage(oracle, &prefix, regime, examples)?;
        out.push(CoverageIncrement { neuron, individual: ind, incremental: union - covered });
        covered = union;
    }
    Ok(out)
}

/// One condition x regime slice of the pipeline: plan, search, anchors.
pub struct CircuitRun {
    pub regime: BaselineRegime,
    pub plan: CoveragePlan,
    pub search: MergedSearch,
    pub anchors: Vec<AnchorOutcome>,
}

impl CircuitRun {
    pub fn empty(regime: BaselineRegime) -> Self {
        CircuitRun {
            regime,
            plan: CoveragePlan {
                kind: PlanKind::Spectral,
                seed: 0,
                selected_plus: Vec::new(),
                selected_minus: Vec::new(),
                pairs: Vec::new(),
                diagnostics: None,
                fallback_matches: 0,
                truncated: false,
            },
            search: MergedSearch::default(),
            anchors: Vec::new(),
        }
    }

    pub fn hq_neurons(&self, threshold: f64) -> Vec<NeuronCoord> {
        self.anchors
            .iter()
            .filter(|a| a.test_mcc.map(|m| m >= threshold).unwrap_or(false))
            .map(|a| a.neuron)
            .collect()
    }
}

/// Run derive -> plan -> localize -> anchor for one condition and regime.
/// Degenerate derived slices (one side empty) yield an empty run rather
/// than an error, since mismatched splitters legitimately produce them.
#[allow(clippy::too_many_arguments)]
pub fn run_circuit(
    bundle: &TaskBundle,
    oracle: &SyntheticOracle,
    retention: &Retention,
    condition: SplitCondition,
    splitter: Option<&RuleSet>,
    plan_kind: PlanKind,
    regime: BaselineRegime,
    cfg: &RunConfig,
    salt: &str,
) -> PipelineResult<CircuitRun> {
    let (plus, minus) =
        derive_slices(condition, splitter, bundle, regime, cfg.coverage.plan.d_pca)?;
    if plus.is_empty() || minus.is_empty() {
        return Ok(CircuitRun::empty(regime));
    }
    let plan = build_plan(plan_kind, bundle, regime, &plus, &minus, cfg, &format!("plan/{salt}"))?;
    let search = if cfg.stages.localize {
        localize(oracle, retention, &plan, regime, cfg, &format!("search/{salt}"))?
    } else {
        MergedSearch::default()
    };
    let anchors = if cfg.stages.anchor {
        let anchor_cfg = AnchorConfig {
            enumeration: cfg.rules.enumeration,
            seed_k: cfg.rules.seed_k,
            hq_threshold: cfg.rules.hq_threshold,
        };
        anchor_neurons(oracle, &bundle.matrix, &search.agonists, &plan, regime, &anchor_cfg)?
    } else {
        Vec::new()
    };
    Ok(CircuitRun { regime, plan, search, anchors })
}

/// Mann-Whitney U statistic (with midrank ties) for `a` against `b`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0usize))
        .chain(b.iter().map(|&v| (v, 1usize)))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut rank_sum_a = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            if item.1 == 0 {
                rank_sum_a += midrank;
            }
        }
        i = j + 1;
    }
    rank_sum_a - a.len() as f64 * (a.len() as f64 + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;

    fn small_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.master_seed = seed;
        cfg.task.layer_widths = vec![16, 16];
        cfg.task.agonist_strengths = vec![0.6, 0.45, 0.3];
        cfg.coverage.plan.n_sel = 32;
        cfg
    }

    #[test]
    fn bundle_is_deterministic_per_master_seed() {
        let cfg = small_config(5);
        let a = build_bundle(&cfg, "task").unwrap();
        let b = build_bundle(&cfg, "task").unwrap();
        assert_eq!(a.task, b.task);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn splitter_recovers_slice_marker_exactly() {
        let cfg = small_config(7);
        let bundle = build_bundle(&cfg, "task").unwrap();
        let splitters = extract_splitters(&bundle.matrix, &bundle.labels, &cfg, None).unwrap();
        assert!(!splitters.is_empty());
        assert!(
            splitters[0].validation_mcc > 0.95,
            "plantable matrix has a perfect marker; got {}",
            splitters[0].validation_mcc
        );
        // derived slices match the planted slicing
        let (plus, _minus) = derive_slices(
            SplitCondition::Rule,
            Some(&splitters[0].rule),
            &bundle,
            BaselineRegime::Positive,
            cfg.coverage.plan.d_pca,
        )
        .unwrap();
        for id in plus {
            assert_eq!(
                bundle.task.planted_slice_of(id).unwrap(),
                SliceTag::Associated
            );
        }
    }

    #[test]
    fn fake_splitter_generalizes_poorly() {
        let mut gaps = Vec::new();
        for seed in 0..10 {
            let cfg = small_config(100 + seed);
            let bundle = build_bundle(&cfg, "task").unwrap();
            let fake =
                extract_splitters(&bundle.matrix, &bundle.labels, &cfg, Some(seed)).unwrap();
            gaps.push(fake[0].validation_mcc);
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = gaps[gaps.len() / 2];
        assert!(median < 0.2, "fake splitter median validation MCC {median}");
    }

    #[test]
    fn full_circuit_run_finds_and_anchors_planted_neurons() {
        let mut cfg = small_config(11);
        // full-subset plans keep rate estimates exact for this check
        cfg.coverage.plan.n_sel = 64;
        let bundle = build_bundle(&cfg, "task").unwrap();
        let oracle = SyntheticOracle::new(bundle.task.clone());
        let retention = retention_for(&cfg, &bundle.task).unwrap();
        let splitters = extract_splitters(&bundle.matrix, &bundle.labels, &cfg, None).unwrap();
        let run = run_circuit(
            &bundle,
            &oracle,
            &retention,
            SplitCondition::Rule,
            Some(&splitters[0].rule),
            PlanKind::Spectral,
            BaselineRegime::Positive,
            &cfg,
            "t",
        )
        .unwrap();
        let planted: Vec<NeuronCoord> = bundle
            .task
            .planted_agonists(BaselineRegime::Positive)
            .iter()
            .map(|p| p.coord)
            .collect();
        let found: Vec<NeuronCoord> = run.search.agonists.iter().map(|r| r.neuron).collect();
        for coord in &planted {
            assert!(found.contains(coord), "planted {coord} not localized");
        }
        // plantable triggers give every planted agonist a perfect anchor
        let hq = run.hq_neurons(0.99);
        for coord in &planted {
            assert!(hq.contains(coord), "planted {coord} not anchored at MCC 1");
        }
        assert!(oracle.query_count() > 0);
        assert!(run.search.stats.group_evaluations > 0);
    }

    #[test]
    fn stage_isolation_reduce_disabled_searches_full_universe() {
        let mut cfg = small_config(13);
        cfg.stages.reduce = false;
        let bundle = build_bundle(&cfg, "task").unwrap();
        let retention = retention_for(&cfg, &bundle.task).unwrap();
        assert_eq!(retention.realized, 32);
    }

    #[test]
    fn mann_whitney_basics() {
        // disjoint samples: every a above every b
        let u = mann_whitney_u(&[5.0, 6.0, 7.0], &[1.0, 2.0]);
        assert_eq!(u, 6.0);
        let u = mann_whitney_u(&[1.0, 2.0], &[5.0, 6.0, 7.0]);
        assert_eq!(u, 0.0);
        // identical samples: U = n*m/2
        let u = mann_whitney_u(&[3.0, 3.0], &[3.0, 3.0]);
        assert_eq!(u, 2.0);
    }
}

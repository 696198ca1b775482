//! The four experiment families, each persisting every artifact it reports
//! from and emitting a machine-readable report plus a flat CSV view.

use std::io;
use std::io::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{
    brute_force_singletons, default_bins, recall_by_tier, write_recall_csv, RecallReport,
    SearchResultSet,
};
use crate::coverage::{CoverageDiagnostics, PlanKind};
use crate::effects::{BaselineRegime, NeuronCoord};
use crate::harness::artifacts::ArtifactStore;
use crate::harness::config::{derive_seed, RunConfig};
use crate::harness::pipeline::{
    build_bundle, extract_splitters, extraction_matrix_for, hq_count_at, incremental_coverage,
    mann_whitney_u, retention_for, run_circuit, stage_err, union_coverage, CircuitRun,
    CoverageIncrement, PipelineResult, SplitCondition, SplitterOutcome, TaskBundle,
};
use crate::localizer::write_agonists_csv;
use crate::oracle::{BehaviorOracle as _, SyntheticOracle};
use crate::rules::RuleSet;
use crate::stats::{write_feature_csv, FilterReport};

fn io_err<E: std::error::Error + Send + Sync + 'static>(e: E) -> io::Error {
    io::Error::new(io::ErrorKind::Other, e)
}

/// A reported value together with the artifact file it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traced<T> {
    pub value: T,
    pub source: String,
}

impl<T> Traced<T> {
    fn new(value: T, source: impl Into<String>) -> Self {
        Traced { value, source: source.into() }
    }
}

/// Features stage: filter the predicate columns and persist the score table.
fn features_stage(
    bundle: &TaskBundle,
    cfg: &RunConfig,
    store: &ArtifactStore,
) -> PipelineResult<(crate::rules::PredicateMatrix, Option<FilterReport>)> {
    let (matrix, report) = extraction_matrix_for(bundle, cfg)?;
    if let Some(report) = &report {
        store.write_csv("features.csv", |w| write_feature_csv(report, w).map_err(io_err))?;
    }
    Ok((matrix, report))
}

fn write_circuit_artifacts(
    store: &ArtifactStore,
    circuit_id: &str,
    run: &CircuitRun,
) -> PipelineResult<(String, String, String)> {
    let tag = format!("{circuit_id}_{}", run.regime);
    let plan_file = format!("coverage_{tag}.json");
    store.write_json(&plan_file, &run.plan)?;
    let tree_file = format!("tree_{tag}.jsonl");
    store.write_csv(&tree_file, |w| {
        for node in &run.search.tree {
            let line = serde_json::to_string(node).map_err(io_err)?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    let agonists_file = format!("agonists_{tag}.csv");
    store.write_csv(&agonists_file, |w| {
        write_agonists_csv(&run.search.agonists, w).map_err(io_err)
    })?;
    let anchors_file = format!("anchors_{tag}.json");
    store.write_json(&anchors_file, &run.anchors)?;
    let mut text = String::new();
    for anchor in &run.anchors {
        if let Some(rule) = &anchor.rule {
            text.push_str(&format!("{}: {}\n", anchor.neuron, rule.to_rule_text()));
        } else {
            text.push_str(&format!("{}: no anchored rule\n", anchor.neuron));
        }
    }
    store.write_string(&format!("anchors_{tag}.txt"), &text)?;
    Ok((plan_file, agonists_file, anchors_file))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E0Regime {
    pub regime: BaselineRegime,
    pub agonist_count: Traced<u64>,
    pub selective_count: u64,
    pub catastrophic_count: u64,
    pub selectivity_mean: f64,
    pub group_evaluations: Traced<u64>,
    pub anchored_count: Traced<u64>,
    pub hq_count: Traced<u64>,
    pub union_flip_coverage: Traced<f64>,
    pub incremental_coverage: Vec<CoverageIncrement>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E0Circuit {
    pub circuit_id: String,
    pub splitter_text: String,
    pub splitter_validation_mcc: Traced<f64>,
    pub splitter_gate_eligible: bool,
    pub regimes: Vec<E0Regime>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E0Report {
    pub master_seed: u64,
    pub hq_threshold: f64,
    pub circuits: Vec<E0Circuit>,
}

fn regime_report(
    run: &CircuitRun,
    oracle: &SyntheticOracle,
    cfg: &RunConfig,
    files: &(String, String, String),
) -> PipelineResult<E0Regime> {
    let (_plan_file, agonists_file, anchors_file) = files;
    let hq: Vec<NeuronCoord> = run.hq_neurons(cfg.rules.hq_threshold);
    let mut evaluated: Vec<_> = run
        .plan
        .selected_plus
        .iter()
        .chain(run.plan.selected_minus.iter())
        .copied()
        .collect();
    evaluated.sort();
    evaluated.dedup();
    let union = union_coverage(oracle, &hq, run.regime, &evaluated)?;
    let incremental = incremental_coverage(oracle, &hq, run.regime, &evaluated)?;
    let selectivities: Vec<f64> = run
        .search
        .agonists
        .iter()
        .map(|r| r.effect.selectivity_abs())
        .collect();
    let selectivity_mean = if selectivities.is_empty() {
        0.0
    } else {
        selectivities.iter().sum::<f64>() / selectivities.len() as f64
    };
    Ok(E0Regime {
        regime: run.regime,
        agonist_count: Traced::new(run.search.agonists.len() as u64, agonists_file.clone()),
        selective_count: run.search.agonists.iter().filter(|r| r.selective).count() as u64,
        catastrophic_count: run.search.agonists.iter().filter(|r| r.catastrophic).count() as u64,
        selectivity_mean,
        group_evaluations: Traced::new(run.search.stats.group_evaluations, agonists_file.clone()),
        anchored_count: Traced::new(
            run.anchors.iter().filter(|a| a.rule.is_some()).count() as u64,
            anchors_file.clone(),
        ),
        hq_count: Traced::new(hq.len() as u64, anchors_file.clone()),
        union_flip_coverage: Traced::new(union, anchors_file.clone()),
        incremental_coverage: incremental,
    })
}

/// End-to-end pipeline on one synthetic task: features, splitters, coverage,
/// reduction, localization, anchoring, and union flip coverage per
/// direction.
pub fn run_e0(cfg: &RunConfig) -> PipelineResult<E0Report> {
    cfg.validate().map_err(|e| stage_err("config", e.to_string()))?;
    let started = Instant::now();
    let store = ArtifactStore::create(cfg.resolved_out_dir())?;
    store.write_string("config.toml", &cfg.to_toml_string())?;
    let bundle = build_bundle(cfg, "task")?;
    store.write_string("task.json", &bundle.task.to_manifest().to_json())?;
    let (extraction_matrix, _filter) = features_stage(&bundle, cfg, &store)?;

    let splitters = if extraction_matrix.columns().is_empty() {
        Vec::new()
    } else {
        extract_splitters(&extraction_matrix, &bundle.labels, cfg, None)?
    };
    store.write_json("splitters.json", &splitters)?;
    for s in &splitters {
        store.write_string(&format!("splitter_{}.txt", s.circuit_id), &s.rule.to_rule_text())?;
    }

    let retention = retention_for(cfg, &bundle.task)?;
    store.write_json("retention.json", &retention)?;
    let oracle = SyntheticOracle::new(bundle.task.clone());

    let mut circuits = Vec::new();
    for splitter in &splitters {
        let mut regimes = Vec::new();
        for regime in BaselineRegime::both() {
            let run = run_circuit(
                &bundle,
                &oracle,
                &retention,
                SplitCondition::Rule,
                Some(&splitter.rule),
                PlanKind::Spectral,
                regime,
                cfg,
                &format!("e0/{}/{}", splitter.circuit_id, regime),
            )?;
            let files = write_circuit_artifacts(&store, &splitter.circuit_id, &run)?;
            regimes.push(regime_report(&run, &oracle, cfg, &files)?);
        }
        circuits.push(E0Circuit {
            circuit_id: splitter.circuit_id.clone(),
            splitter_text: splitter.rule.to_rule_text(),
            splitter_validation_mcc: Traced::new(splitter.validation_mcc, "splitters.json"),
            splitter_gate_eligible: splitter.rule.gate_eligible.unwrap_or(false),
            regimes,
        });
    }

    let report = E0Report {
        master_seed: cfg.master_seed,
        hq_threshold: cfg.rules.hq_threshold,
        circuits,
    };
    store.write_json("report.json", &report)?;
    write_flat_csv(&store, &serde_json::to_value(&report).map_err(io_err)?)?;
    store.write_meta(started.elapsed().as_millis())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum E1Condition {
    RuleSpectral,
    SpectralOnly,
    RuleRandom,
    FakeSpectral,
}

impl E1Condition {
    pub fn all() -> [E1Condition; 4] {
        [
            E1Condition::RuleSpectral,
            E1Condition::SpectralOnly,
            E1Condition::RuleRandom,
            E1Condition::FakeSpectral,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            E1Condition::RuleSpectral => "rule+spectral",
            E1Condition::SpectralOnly => "spectral-only",
            E1Condition::RuleRandom => "rule+random",
            E1Condition::FakeSpectral => "fake+spectral",
        }
    }

    fn split(self) -> SplitCondition {
        match self {
            E1Condition::RuleSpectral | E1Condition::RuleRandom => SplitCondition::Rule,
            E1Condition::SpectralOnly => SplitCondition::SpectralOnly,
            E1Condition::FakeSpectral => SplitCondition::FakeRule,
        }
    }

    fn plan(self) -> PlanKind {
        match self {
            E1Condition::RuleRandom => PlanKind::Random,
            _ => PlanKind::Spectral,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E1ConditionCounts {
    pub condition: E1Condition,
    pub splitter_validation_mcc: Option<f64>,
    /// High-quality anchored counts per threshold, summed over both flip
    /// directions.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E1SeedRow {
    pub seed_index: u32,
    pub conditions: Vec<E1ConditionCounts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E1Report {
    pub master_seed: u64,
    pub thresholds: Vec<f64>,
    pub per_seed: Traced<Vec<E1SeedRow>>,
    /// Per-condition medians over seeds, per threshold.
    pub medians: Vec<E1ConditionCounts>,
    /// Mann-Whitney U of rule+spectral vs the fake-rule control over the
    /// pooled per-seed threshold counts (convenience statistic only).
    pub u_rule_vs_fake: f64,
}

/// Run one condition across both regimes, returning HQ counts per threshold.
fn e1_condition_counts(
    bundle: &TaskBundle,
    oracle: &SyntheticOracle,
    retention: &crate::candidates::Retention,
    extraction_matrix: &crate::rules::PredicateMatrix,
    condition: E1Condition,
    cfg: &RunConfig,
    seed_index: u32,
    thresholds: &[f64],
) -> PipelineResult<E1ConditionCounts> {
    let splitter: Option<SplitterOutcome> = match condition.split() {
        SplitCondition::SpectralOnly => None,
        SplitCondition::Rule => {
            extract_splitters(extraction_matrix, &bundle.labels, cfg, None)?.into_iter().next()
        }
        SplitCondition::FakeRule => extract_splitters(
            extraction_matrix,
            &bundle.labels,
            cfg,
            Some(derive_seed(cfg.master_seed, &format!("fake/{seed_index}"))),
        )?
        .into_iter()
        .next(),
    };
    let rule: Option<&RuleSet> = splitter.as_ref().map(|s| &s.rule);
    let mut counts = vec![0u64; thresholds.len()];
    for regime in BaselineRegime::both() {
        let run = run_circuit(
            bundle,
            oracle,
            retention,
            condition.split(),
            rule,
            condition.plan(),
            regime,
            cfg,
            &format!("e1/{seed_index}/{}/{}", condition.label(), regime),
        )?;
        for (slot, &t) in thresholds.iter().enumerate() {
            counts[slot] += hq_count_at(&run.anchors, t);
        }
    }
    Ok(E1ConditionCounts {
        condition,
        splitter_validation_mcc: splitter.as_ref().map(|s| s.validation_mcc),
        counts,
    })
}

/// Condition comparison: rule split + spectral coverage against the
/// spectral-only split, random coverage, and the fake-rule control, swept
/// over high-quality thresholds and seeds.
pub fn run_e1(cfg: &RunConfig) -> PipelineResult<E1Report> {
    cfg.validate().map_err(|e| stage_err("config", e.to_string()))?;
    let started = Instant::now();
    let store = ArtifactStore::create(cfg.resolved_out_dir())?;
    store.write_string("config.toml", &cfg.to_toml_string())?;
    let thresholds = cfg.report.thresholds.clone();

    let mut per_seed = Vec::new();
    for seed_index in 0..cfg.report.e1_seeds {
        let seed_cfg = RunConfig {
            master_seed: derive_seed(cfg.master_seed, &format!("e1/seed/{seed_index}")),
            ..cfg.clone()
        };
        let bundle = build_bundle(&seed_cfg, "task")?;
        let oracle = SyntheticOracle::new(bundle.task.clone());
        let retention = retention_for(&seed_cfg, &bundle.task)?;
        let (extraction_matrix, _) = extraction_matrix_for(&bundle, &seed_cfg)?;
        let mut conditions = Vec::new();
        for condition in E1Condition::all() {
            conditions.push(e1_condition_counts(
                &bundle,
                &oracle,
                &retention,
                &extraction_matrix,
                condition,
                &seed_cfg,
                seed_index,
                &thresholds,
            )?);
        }
        per_seed.push(E1SeedRow { seed_index, conditions });
    }

    // per-seed counts as CSV
    store.write_csv("e1_counts.csv", |w| {
        let mut writer = csv::Writer::from_writer(w);
        let mut header = vec!["seed".to_string(), "condition".to_string(), "splitter_mcc".to_string()];
        header.extend(thresholds.iter().map(|t| format!("t{t}")));
        writer.write_record(&header).map_err(io_err)?;
        for row in &per_seed {
            for cond in &row.conditions {
                let mut record = vec![
                    row.seed_index.to_string(),
                    cond.condition.label().to_string(),
                    cond.splitter_validation_mcc
                        .map(|m| format!("{m}"))
                        .unwrap_or_default(),
                ];
                record.extend(cond.counts.iter().map(|c| c.to_string()));
                writer.write_record(&record).map_err(io_err)?;
            }
        }
        writer.flush()?;
        Ok(())
    })?;

    let median_for = |condition: E1Condition| -> E1ConditionCounts {
        let mut counts = Vec::new();
        for slot in 0..thresholds.len() {
            let mut values: Vec<u64> = per_seed
                .iter()
                .flat_map(|row| row.conditions.iter())
                .filter(|c| c.condition == condition)
                .map(|c| c.counts[slot])
                .collect();
            values.sort_unstable();
            counts.push(if values.is_empty() { 0 } else { values[values.len() / 2] });
        }
        E1ConditionCounts { condition, splitter_validation_mcc: None, counts }
    };
    let medians: Vec<E1ConditionCounts> = E1Condition::all().iter().map(|&c| median_for(c)).collect();

    let pooled = |condition: E1Condition| -> Vec<f64> {
        per_seed
            .iter()
            .flat_map(|row| row.conditions.iter())
            .filter(|c| c.condition == condition)
            .flat_map(|c| c.counts.iter().map(|&v| v as f64))
            .collect()
    };
    let u_rule_vs_fake = mann_whitney_u(
        &pooled(E1Condition::RuleSpectral),
        &pooled(E1Condition::FakeSpectral),
    );

    let report = E1Report {
        master_seed: cfg.master_seed,
        thresholds,
        per_seed: Traced::new(per_seed, "e1_counts.csv"),
        medians,
        u_rule_vs_fake,
    };
    store.write_json("report.json", &report)?;
    write_flat_csv(&store, &serde_json::to_value(&report).map_err(io_err)?)?;
    store.write_meta(started.elapsed().as_millis())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2RegimeReport {
    pub regime: BaselineRegime,
    pub recall: Traced<RecallReport>,
    pub search_evaluations: u64,
    pub brute_evaluations: u64,
    pub cost_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2Report {
    pub master_seed: u64,
    pub circuit_id: String,
    pub regimes: Vec<E2RegimeReport>,
}

/// Hierarchical search against exhaustive singletons on the same circuit,
/// candidate set, and evaluation subset, with tiered recall and the
/// evaluation-cost ratio.
pub fn run_e2(cfg: &RunConfig) -> PipelineResult<E2Report> {
    cfg.validate().map_err(|e| stage_err("config", e.to_string()))?;
    let started = Instant::now();
    let store = ArtifactStore::create(cfg.resolved_out_dir())?;
    store.write_string("config.toml", &cfg.to_toml_string())?;
    let bundle = build_bundle(cfg, "task")?;
    store.write_string("task.json", &bundle.task.to_manifest().to_json())?;
    let oracle = SyntheticOracle::new(bundle.task.clone());
    let retention = retention_for(cfg, &bundle.task)?;
    store.write_json("retention.json", &retention)?;

    let splitters = extract_splitters(&bundle.matrix, &bundle.labels, cfg, None)?;
    let splitter = splitters
        .first()
        .ok_or_else(|| stage_err("e2", "no splitter extracted"))?;
    let circuit_id = splitter.circuit_id.clone();

    let mut regimes = Vec::new();
    let mut recalls = Vec::new();
    for regime in BaselineRegime::both() {
        let run = run_circuit(
            &bundle,
            &oracle,
            &retention,
            SplitCondition::Rule,
            Some(&splitter.rule),
            PlanKind::Spectral,
            regime,
            cfg,
            &format!("e2/{regime}"),
        )?;
        let files = write_circuit_artifacts(&store, &circuit_id, &run)?;
        let subset = crate::localizer::EvalSubset {
            plus: run.plan.selected_plus.clone(),
            minus: run.plan.selected_minus.clone(),
        };
        let before = oracle.query_count();
        let brute = if subset.plus.is_empty() || subset.minus.is_empty() {
            Vec::new()
        } else {
            brute_force_singletons(
                &retention.all_coords(),
                &oracle,
                &subset,
                regime,
                &cfg.seeded_search("e2/brute"),
            )
            .map_err(|e| stage_err("e2", e.to_string()))?
        };
        let brute_evaluations = oracle.query_count() - before;
        let brute_file = format!("brute_{circuit_id}_{regime}.csv");
        store.write_csv(&brute_file, |w| write_agonists_csv(&brute, w).map_err(io_err))?;

        let recall = recall_by_tier(
            &SearchResultSet { circuit_id: circuit_id.clone(), records: run.search.agonists.clone() },
            &SearchResultSet { circuit_id: circuit_id.clone(), records: brute },
            &default_bins(cfg.search.tau),
        )
        .map_err(|e| stage_err("e2", e.to_string()))?;
        recalls.push(recall.clone());
        let search_evaluations = run.search.stats.group_evaluations;
        regimes.push(E2RegimeReport {
            regime,
            recall: Traced::new(recall, files.1.clone()),
            search_evaluations,
            brute_evaluations,
            cost_ratio: if brute_evaluations == 0 {
                0.0
            } else {
                search_evaluations as f64 / brute_evaluations as f64
            },
        });
    }
    store.write_csv("recall.csv", |w| {
        write_recall_csv("synthetic", &recalls, w).map_err(io_err)
    })?;

    let report = E2Report { master_seed: cfg.master_seed, circuit_id, regimes };
    store.write_json("report.json", &report)?;
    write_flat_csv(&store, &serde_json::to_value(&report).map_err(io_err)?)?;
    store.write_meta(started.elapsed().as_millis())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E3PlanOutcome {
    pub kind: PlanKind,
    pub hq_count: u64,
    pub diagnostics: Option<CoverageDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E3SeedRow {
    pub seed_index: u32,
    pub spectral: E3PlanOutcome,
    pub random: E3PlanOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E3Report {
    pub master_seed: u64,
    pub hq_threshold: f64,
    pub per_seed: Traced<Vec<E3SeedRow>>,
    pub spectral_median_hq: u64,
    pub random_median_hq: u64,
}

/// Spectral vs random coverage plans on the same task and splitter.
pub fn run_e3(cfg: &RunConfig) -> PipelineResult<E3Report> {
    cfg.validate().map_err(|e| stage_err("config", e.to_string()))?;
    let started = Instant::now();
    let store = ArtifactStore::create(cfg.resolved_out_dir())?;
    store.write_string("config.toml", &cfg.to_toml_string())?;

    let mut per_seed = Vec::new();
    for seed_index in 0..cfg.report.e3_seeds {
        let seed_cfg = RunConfig {
            master_seed: derive_seed(cfg.master_seed, &format!("e3/seed/{seed_index}")),
            ..cfg.clone()
        };
        let bundle = build_bundle(&seed_cfg, "task")?;
        let oracle = SyntheticOracle::new(bundle.task.clone());
        let retention = retention_for(&seed_cfg, &bundle.task)?;
        let splitters = extract_splitters(&bundle.matrix, &bundle.labels, &seed_cfg, None)?;
        let splitter = splitters
            .first()
            .ok_or_else(|| stage_err("e3", "no splitter extracted"))?;
        let outcome_for = |kind: PlanKind| -> PipelineResult<E3PlanOutcome> {
            let mut hq = 0u64;
            let mut diagnostics = None;
            for regime in BaselineRegime::both() {
                let run = run_circuit(
                    &bundle,
                    &oracle,
                    &retention,
                    SplitCondition::Rule,
                    Some(&splitter.rule),
                    kind,
                    regime,
                    &seed_cfg,
                    &format!("e3/{seed_index}/{kind:?}/{regime}"),
                )?;
                hq += hq_count_at(&run.anchors, seed_cfg.rules.hq_threshold);
                if regime == BaselineRegime::Positive {
                    diagnostics = run.plan.diagnostics.clone();
                }
            }
            Ok(E3PlanOutcome { kind, hq_count: hq, diagnostics })
        };
        let spectral = outcome_for(PlanKind::Spectral)?;
        let random = outcome_for(PlanKind::Random)?;
        per_seed.push(E3SeedRow { seed_index, spectral, random });
    }

    store.write_csv("e3_counts.csv", |w| {
        let mut writer = csv::Writer::from_writer(w);
        writer
            .write_record(["seed", "plan", "hq_count"])
            .map_err(io_err)?;
        for row in &per_seed {
            writer
                .write_record([
                    row.seed_index.to_string(),
                    "spectral".into(),
                    row.spectral.hq_count.to_string(),
                ])
                .map_err(io_err)?;
            writer
                .write_record([
                    row.seed_index.to_string(),
                    "random".into(),
                    row.random.hq_count.to_string(),
                ])
                .map_err(io_err)?;
        }
        writer.flush()?;
        Ok(())
    })?;

    let median = |values: &mut Vec<u64>| -> u64 {
        values.sort_unstable();
        if values.is_empty() {
            0
        } else {
            values[values.len() / 2]
        }
    };
    let mut spectral_counts: Vec<u64> = per_seed.iter().map(|r| r.spectral.hq_count).collect();
    let mut random_counts: Vec<u64> = per_seed.iter().map(|r| r.random.hq_count).collect();
    let report = E3Report {
        master_seed: cfg.master_seed,
        hq_threshold: cfg.rules.hq_threshold,
        per_seed: Traced::new(per_seed, "e3_counts.csv"),
        spectral_median_hq: median(&mut spectral_counts),
        random_median_hq: median(&mut random_counts),
    };
    store.write_json("report.json", &report)?;
    write_flat_csv(&store, &serde_json::to_value(&report).map_err(io_err)?)?;
    store.write_meta(started.elapsed().as_millis())?;
    Ok(report)
}

/// Flatten a report JSON tree into `path,value` CSV rows; `source` fields
/// become the third column of their parent path.
pub fn write_flat_csv(store: &ArtifactStore, report: &serde_json::Value) -> io::Result<()> {
    fn flatten(value: &serde_json::Value, path: String, rows: &mut Vec<(String, String, String)>) {
        match value {
            serde_json::Value::Object(map) => {
                if let (Some(v), Some(src)) = (map.get("value"), map.get("source")) {
                    if map.len() == 2 {
                        flatten_traced(v, src, path, rows);
                        return;
                    }
                }
                for (key, v) in map {
                    let next = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                    flatten(v, next, rows);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    flatten(v, format!("{path}[{i}]"), rows);
                }
            }
            other => rows.push((path, scalar(other), String::new())),
        }
    }
    fn flatten_traced(
        value: &serde_json::Value,
        source: &serde_json::Value,
        path: String,
        rows: &mut Vec<(String, String, String)>,
    ) {
        let src = source.as_str().unwrap_or_default().to_string();
        match value {
            serde_json::Value::Object(_) | serde_json::Value::Array(_) => {
                let mut inner = Vec::new();
                flatten(value, path, &mut inner);
                for (p, v, _) in inner {
                    rows.push((p, v, src.clone()));
                }
            }
            other => rows.push((path, scalar(other), src)),
        }
    }
    fn scalar(value: &serde_json::Value) -> String {
        match value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    let mut rows = Vec::new();
    flatten(report, String::new(), &mut rows);
    store.write_csv("report.csv", |w| {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(["metric", "value", "source"]).map_err(io_err)?;
        for (path, value, source) in &rows {
            writer.write_record([path, value, source]).map_err(io_err)?;
        }
        writer.flush()?;
        Ok(())
    })?;
    Ok(())
}

/// Rebuild `report.csv` from a persisted `report.json`.
pub fn rebuild_report_csv(store: &ArtifactStore) -> io::Result<()> {
    let text = store.read_string("report.json")?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(io_err)?;
    write_flat_csv(store, &value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ScorerKind;

    fn tiny_config(dir: &std::path::Path, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.master_seed = seed;
        cfg.out_dir = dir.to_path_buf();
        cfg.task.layer_widths = vec![16];
        cfg.task.agonist_strengths = vec![0.6, 0.4, 0.3];
        cfg.coverage.plan.n_sel = 64;
        cfg.coverage.plan.k_centers = 8;
        cfg.report.e1_seeds = 2;
        cfg.report.e3_seeds = 2;
        cfg
    }

    #[test]
    fn e0_produces_anchored_agonists_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("e0"), 3);
        let report = run_e0(&cfg).unwrap();
        assert_eq!(report.circuits.len(), 1);
        let positive = &report.circuits[0].regimes[0];
        assert!(positive.agonist_count.value >= 3, "planted agonists found");
        assert!(positive.hq_count.value >= 3, "plantable anchors are high quality");
        assert!(positive.union_flip_coverage.value > 0.0);
        let store = ArtifactStore::create(cfg.resolved_out_dir()).unwrap();
        let files = store.list().unwrap();
        for needed in [
            "config.toml",
            "task.json",
            "features.csv",
            "splitters.json",
            "retention.json",
            "report.json",
            "report.csv",
            "meta.json",
        ] {
            assert!(files.iter().any(|f| f == needed), "missing artifact {needed}");
        }
    }

    #[test]
    fn e0_with_empty_search_space_reports_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("e0-empty"), 5);
        // leak every planted agonist and retain a single background neuron
        cfg.candidates.scorer = ScorerKind::GroundTruth { leak_rate: 1.0 };
        cfg.candidates.budget = 1;
        let report = run_e0(&cfg).unwrap();
        for circuit in &report.circuits {
            for regime in &circuit.regimes {
                assert_eq!(regime.agonist_count.value, 0);
                assert_eq!(regime.hq_count.value, 0);
            }
        }
    }

    #[test]
    fn e2_exact_setup_reaches_full_recall() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("e2"), 7);
        cfg.task.layer_widths = vec![64];
        let report = run_e2(&cfg).unwrap();
        let positive = &report.regimes[0];
        assert_eq!(positive.recall.value.overall_percentage(), Some(1.0));
        assert!(positive.cost_ratio > 0.0);
        assert_eq!(positive.brute_evaluations, 64);
    }

    #[test]
    fn e1_and_e3_reports_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("e1"), 11);
        let report = run_e1(&cfg).unwrap();
        assert_eq!(report.per_seed.value.len(), 2);
        assert_eq!(report.medians.len(), 4);
        for median in &report.medians {
            // threshold sweep is monotone nonincreasing
            for pair in median.counts.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }

        let cfg3 = tiny_config(&dir.path().join("e3"), 11);
        let report = run_e3(&cfg3).unwrap();
        assert_eq!(report.per_seed.value.len(), 2);
    }

    #[test]
    fn flat_csv_carries_sources() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::create(dir.path().join("flat")).unwrap();
        let value = serde_json::json!({
            "count": { "value": 3, "source": "agonists.csv" },
            "nested": [ { "x": 1.5 } ],
        });
        write_flat_csv(&store, &value).unwrap();
        let text = store.read_string("report.csv").unwrap();
        assert!(text.contains("count,3,agonists.csv"));
        assert!(text.contains("nested[0].x,1.5,"));
    }
}

//! CLI for the neuron-localization laboratory. Stage subcommands read and
//! write artifacts in the run directory so each stage can be rerun
//! independently; the e0-e3 subcommands run whole experiment families.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use agonist_core::harness::artifacts::ArtifactStore;
use agonist_core::harness::config::RunConfig;
use agonist_core::harness::experiments::{
    rebuild_report_csv, run_e0, run_e1, run_e2, run_e3,
};
use agonist_core::harness::pipeline::{
    anchor_neurons, build_plan, bundle_from_task, derive_slices, extract_splitters,
    extraction_matrix_for, localize, retention_for, SplitCondition, SplitterOutcome,
    TaskBundle,
};
use agonist_core::baseline::brute_force_singletons;
use agonist_core::candidates::Retention;
use agonist_core::coverage::{CoveragePlan, PlanKind};
use agonist_core::localizer::{write_agonists_csv, EvalSubset};
use agonist_core::oracle::{plant_task, SyntheticOracle, SyntheticTask, TaskManifest};
use agonist_core::rules::AnchorConfig;
use agonist_core::stats::write_feature_csv;
use agonist_core::{AgonistRecord, BaselineRegime, BehaviorOracle};

#[derive(Parser)]
#[command(
    name = "agonist",
    about = "Localize sparse high-effect neuron coordinates and anchor symbolic rules to them",
    version
)]
struct Cli {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the strength threshold tau.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Override the selectivity threshold epsilon.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Override the pruning confidence level alpha.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Override samples per slice.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plant the synthetic task and write its manifest.
    Plant,
    /// Score and filter predicate columns against the task labels.
    Features,
    /// Extract splitter rules by greedy MCC OR-composition.
    Rules,
    /// Build spectral coverage plans for both regimes.
    Coverage,
    /// Reduce the candidate universe and write the retention manifest.
    Reduce,
    /// Run the hierarchical ablation search on the retained candidates.
    Cha,
    /// Exhaustively evaluate all retained singletons.
    Brute,
    /// Anchor localized singletons with held-out-scored rules.
    Anchor,
    /// End-to-end pipeline experiment.
    E0,
    /// Split/coverage condition comparison experiment.
    E1,
    /// Search-vs-brute-force recall and cost experiment.
    E2,
    /// Spectral-vs-random coverage experiment.
    E3,
    /// Rebuild report.csv from report.json.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {path:?}"))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(tau) = cli.tau {
        cfg.search.tau = tau;
        cfg.task.tau = tau;
    }
    if let Some(epsilon) = cli.epsilon {
        cfg.search.epsilon = epsilon;
    }
    if let Some(alpha) = cli.alpha {
        cfg.search.alpha = alpha;
    }
    if let Some(samples) = cli.samples {
        cfg.search.samples_per_slice = samples;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_store(cfg: &RunConfig) -> Result<ArtifactStore> {
    Ok(ArtifactStore::create(cfg.resolved_out_dir())?)
}

fn load_task(store: &ArtifactStore) -> Result<SyntheticTask> {
    let text = store
        .read_string("task.json")
        .context("task.json not found; run `agonist plant` first")?;
    Ok(SyntheticTask::from_manifest(&TaskManifest::from_json(&text)?)?)
}

fn load_bundle(store: &ArtifactStore, cfg: &RunConfig) -> Result<TaskBundle> {
    Ok(bundle_from_task(load_task(store)?, cfg)?)
}

fn load_splitters(store: &ArtifactStore) -> Result<Vec<SplitterOutcome>> {
    let text = store
        .read_string("splitters.json")
        .context("splitters.json not found; run `agonist rules` first")?;
    Ok(serde_json::from_str(&text)?)
}

fn load_retention(store: &ArtifactStore) -> Result<Retention> {
    let text = store
        .read_string("retention.json")
        .context("retention.json not found; run `agonist reduce` first")?;
    Ok(serde_json::from_str(&text)?)
}

fn load_plan(store: &ArtifactStore, regime: BaselineRegime) -> Result<CoveragePlan> {
    let name = format!("coverage_c0_{regime}.json");
    let text = store
        .read_string(&name)
        .with_context(|| format!("{name} not found; run `agonist coverage` first"))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_agonists(store: &ArtifactStore, regime: BaselineRegime) -> Result<Vec<AgonistRecord>> {
    let name = format!("agonists_c0_{regime}.json");
    let text = store
        .read_string(&name)
        .with_context(|| format!("{name} not found; run `agonist cha` first"))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_plant(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    store.write_string("config.toml", &cfg.to_toml_string())?;
    let task = plant_task(&cfg.seeded_task("task"))?;
    store.write_string("task.json", &task.to_manifest().to_json())?;
    println!(
        "planted task: {} candidates over {} layers, {} examples/slice, {} planted neurons -> {}",
        task.total_candidates(),
        task.universe().len(),
        task.examples_per_slice(),
        task.planted().len(),
        store.path("task.json").display()
    );
    Ok(())
}

fn cmd_features(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let (_, report) = extraction_matrix_for(&bundle, cfg)?;
    match report {
        Some(report) => {
            store.write_csv("features.csv", |w| {
                write_feature_csv(&report, w)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
            })?;
            println!(
                "scored {} columns, retained {} -> {}",
                report.rows.len(),
                report.retained.len(),
                store.path("features.csv").display()
            );
        }
        None => println!("features stage disabled in config"),
    }
    Ok(())
}

fn cmd_rules(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let (matrix, _) = extraction_matrix_for(&bundle, cfg)?;
    if matrix.columns().is_empty() {
        bail!("no predicate columns survived filtering");
    }
    let splitters = extract_splitters(&matrix, &bundle.labels, cfg, None)?;
    store.write_json("splitters.json", &splitters)?;
    for s in &splitters {
        store.write_string(&format!("splitter_{}.txt", s.circuit_id), &s.rule.to_rule_text())?;
        println!(
            "{}: validation MCC {:.3}  {}",
            s.circuit_id,
            s.validation_mcc,
            s.rule.to_rule_text()
        );
    }
    Ok(())
}

fn cmd_coverage(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let splitters = load_splitters(&store)?;
    let splitter = splitters.first().context("no splitters available")?;
    for regime in BaselineRegime::both() {
        let (plus, minus) = derive_slices(
            SplitCondition::Rule,
            Some(&splitter.rule),
            &bundle,
            regime,
            cfg.coverage.plan.d_pca,
        )?;
        if plus.is_empty() || minus.is_empty() {
            println!("{regime}: degenerate derived slices, no plan written");
            continue;
        }
        let plan = build_plan(
            PlanKind::Spectral,
            &bundle,
            regime,
            &plus,
            &minus,
            cfg,
            &format!("plan/cli/{regime}"),
        )?;
        let name = format!("coverage_c0_{regime}.json");
        store.write_json(&name, &plan)?;
        println!(
            "{regime}: selected {}+ / {}- examples, {} matched pairs -> {}",
            plan.selected_plus.len(),
            plan.selected_minus.len(),
            plan.pairs.len(),
            store.path(&name).display()
        );
    }
    Ok(())
}

fn cmd_reduce(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let task = load_task(&store)?;
    let retention = retention_for(cfg, &task)?;
    store.write_json("retention.json", &retention)?;
    println!(
        "retained {} candidates across {} layers -> {}",
        retention.realized,
        retention.per_layer.len(),
        store.path("retention.json").display()
    );
    Ok(())
}

fn cmd_cha(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let oracle = SyntheticOracle::new(bundle.task.clone());
    let retention = load_retention(&store)?;
    for regime in BaselineRegime::both() {
        let plan = match load_plan(&store, regime) {
            Ok(plan) => plan,
            Err(_) => {
                println!("{regime}: no coverage plan, skipped");
                continue;
            }
        };
        let merged = localize(&oracle, &retention, &plan, regime, cfg, &format!("cli/{regime}"))?;
        let tag = format!("c0_{regime}");
        store.write_csv(&format!("tree_{tag}.jsonl"), |w| {
            use std::io::Write as _;
            for node in &merged.tree {
                let line = serde_json::to_string(node)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
                writeln!(w, "{line}")?;
            }
            Ok(())
        })?;
        store.write_csv(&format!("agonists_{tag}.csv"), |w| {
            write_agonists_csv(&merged.agonists, w)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
        })?;
        store.write_json(&format!("agonists_{tag}.json"), &merged.agonists)?;
        println!(
            "{regime}: {} agonists in {} group evaluations ({} nodes pruned)",
            merged.agonists.len(),
            merged.stats.group_evaluations,
            merged.stats.nodes_pruned
        );
    }
    Ok(())
}

fn cmd_brute(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let oracle = SyntheticOracle::new(bundle.task.clone());
    let retention = load_retention(&store)?;
    for regime in BaselineRegime::both() {
        let plan = match load_plan(&store, regime) {
            Ok(plan) => plan,
            Err(_) => {
                println!("{regime}: no coverage plan, skipped");
                continue;
            }
        };
        let subset = EvalSubset {
            plus: plan.selected_plus.clone(),
            minus: plan.selected_minus.clone(),
        };
        let before = oracle.query_count();
        let records = brute_force_singletons(
            &retention.all_coords(),
            &oracle,
            &subset,
            regime,
            &cfg.seeded_search("cli/brute"),
        )?;
        let evals = oracle.query_count() - before;
        let tag = format!("c0_{regime}");
        store.write_csv(&format!("brute_{tag}.csv"), |w| {
            write_agonists_csv(&records, w)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
        })?;
        store.write_json(&format!("brute_{tag}.json"), &records)?;
        println!("{regime}: {} singleton agonists in {evals} evaluations", records.len());
    }
    Ok(())
}

fn cmd_anchor(cfg: &RunConfig) -> Result<()> {
    let store = open_store(cfg)?;
    let bundle = load_bundle(&store, cfg)?;
    let oracle = SyntheticOracle::new(bundle.task.clone());
    let anchor_cfg = AnchorConfig {
        enumeration: cfg.rules.enumeration,
        seed_k: cfg.rules.seed_k,
        hq_threshold: cfg.rules.hq_threshold,
    };
    for regime in BaselineRegime::both() {
        let agonists = match load_agonists(&store, regime) {
            Ok(a) => a,
            Err(_) => {
                println!("{regime}: no localized agonists, skipped");
                continue;
            }
        };
        let plan = load_plan(&store, regime)?;
        let anchors =
            anchor_neurons(&oracle, &bundle.matrix, &agonists, &plan, regime, &anchor_cfg)?;
        let tag = format!("c0_{regime}");
        store.write_json(&format!("anchors_{tag}.json"), &anchors)?;
        let mut text = String::new();
        for anchor in &anchors {
            match &anchor.rule {
                Some(rule) => text.push_str(&format!(
                    "{} (test MCC {}): {}\n",
                    anchor.neuron,
                    anchor.test_mcc.map(|m| format!("{m:.3}")).unwrap_or_else(|| "n/a".into()),
                    rule.to_rule_text()
                )),
                None => text.push_str(&format!("{}: no anchored rule\n", anchor.neuron)),
            }
        }
        store.write_string(&format!("anchors_{tag}.txt"), &text)?;
        let hq = anchors
            .iter()
            .filter(|a| a.test_mcc.map(|m| m >= cfg.rules.hq_threshold).unwrap_or(false))
            .count();
        println!(
            "{regime}: {} anchored rules, {hq} high-quality at MCC >= {}",
            anchors.iter().filter(|a| a.rule.is_some()).count(),
            cfg.rules.hq_threshold
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Plant => cmd_plant(&cfg),
        Command::Features => cmd_features(&cfg),
        Command::Rules => cmd_rules(&cfg),
        Command::Coverage => cmd_coverage(&cfg),
        Command::Reduce => cmd_reduce(&cfg),
        Command::Cha => cmd_cha(&cfg),
        Command::Brute => cmd_brute(&cfg),
        Command::Anchor => cmd_anchor(&cfg),
        Command::E0 => {
            let report = run_e0(&cfg)?;
            let localized: u64 = report
                .circuits
                .iter()
                .flat_map(|c| c.regimes.iter())
                .map(|r| r.agonist_count.value)
                .sum();
            let hq: u64 = report
                .circuits
                .iter()
                .flat_map(|c| c.regimes.iter())
                .map(|r| r.hq_count.value)
                .sum();
            println!(
                "e0: {} circuits, {localized} localized agonists, {hq} high-quality anchors -> {}",
                report.circuits.len(),
                cfg.resolved_out_dir().display()
            );
            Ok(())
        }
        Command::E1 => {
            let report = run_e1(&cfg)?;
            for median in &report.medians {
                println!(
                    "e1 median {}: {:?}",
                    median.condition.label(),
                    median.counts
                );
            }
            println!("e1: U(rule vs fake) = {}", report.u_rule_vs_fake);
            Ok(())
        }
        Command::E2 => {
            let report = run_e2(&cfg)?;
            for regime in &report.regimes {
                let pct = regime
                    .recall
                    .value
                    .overall_percentage()
                    .map(|p| format!("{:.1}%", p * 100.0))
                    .unwrap_or_else(|| "undefined".into());
                println!(
                    "e2 {}: recall {pct} ({}/{}), cost ratio {:.4}",
                    regime.regime,
                    regime.recall.value.overall_recovered,
                    regime.recall.value.overall_total,
                    regime.cost_ratio
                );
            }
            Ok(())
        }
        Command::E3 => {
            let report = run_e3(&cfg)?;
            println!(
                "e3: median high-quality anchors, spectral {} vs random {}",
                report.spectral_median_hq, report.random_median_hq
            );
            Ok(())
        }
        Command::Report => {
            let store = open_store(&cfg)?;
            rebuild_report_csv(&store)?;
            println!("rebuilt {}", store.path("report.csv").display());
            Ok(())
        }
    }
}

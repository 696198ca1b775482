//! Exhaustive singleton search and tiered recall comparison.

use serde::{Deserialize, Serialize};

use crate::effects::{AgonistRecord, BaselineRegime, EffectsError, GroupEffect, NeuronCoord};
use crate::localizer::{EvalSubset, SearchConfig};
use crate::oracle::{BehaviorOracle, OracleError};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("result sets come from different circuits: {0:?} vs {1:?}")]
    CircuitMismatch(String, String),
    #[error("bins must be nonempty and ordered")]
    BadBins,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Effects(#[from] EffectsError),
}

pub type BaselineResult<T> = Result<T, BaselineError>;

/// Evaluate every singleton once on the shared evaluation subset and return
/// all candidates whose point-estimate strength reaches tau. Costs exactly
/// one group evaluation per candidate.
pub fn brute_force_singletons(
    candidates: &[NeuronCoord],
    oracle: &dyn BehaviorOracle,
    subset: &EvalSubset,
    regime: BaselineRegime,
    cfg: &SearchConfig,
) -> BaselineResult<Vec<AgonistRecord>> {
    let b = regime.label();
    let m_plus = cfg.samples_per_slice.min(subset.plus.len());
    let m_minus = cfg.samples_per_slice.min(subset.minus.len());
    let plus = &subset.plus[..m_plus];
    let minus = &subset.minus[..m_minus];
    let mut records = Vec::new();
    for &coord in candidates {
        let out = oracle.query_pair(&[coord], regime, plus, minus)?;
        let flips = |outs: &[bool]| outs.iter().filter(|&&o| o != b).count() as u64;
        let effect = GroupEffect::from_counts(
            flips(&out.plus),
            plus.len() as u64,
            flips(&out.minus),
            minus.len() as u64,
            cfg.alpha,
        )?;
        if effect.strength() >= cfg.tau {
            records.push(AgonistRecord::new(coord, regime, effect, cfg.epsilon));
        }
    }
    Ok(records)
}

/// A localized set tagged with the circuit it was measured on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResultSet {
    pub circuit_id: String,
    pub records: Vec<AgonistRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRecall {
    pub lo: f64,
    pub hi: f64,
    pub recovered: u64,
    pub total: u64,
}

impl TierRecall {
    /// None marks a tier with zero brute-force positives: reported as
    /// undefined, never as 0%.
    pub fn percentage(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.recovered as f64 / self.total as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub circuit_id: String,
    pub regime: BaselineRegime,
    pub tiers: Vec<TierRecall>,
    pub overall_recovered: u64,
    pub overall_total: u64,
    /// Neurons found by the hierarchical search but absent from brute force;
    /// reported separately, never counted as recall.
    pub search_only: Vec<NeuronCoord>,
}

impl RecallReport {
    pub fn overall_percentage(&self) -> Option<f64> {
        if self.overall_total == 0 {
            None
        } else {
            Some(self.overall_recovered as f64 / self.overall_total as f64)
        }
    }
}

/// The reference strength bins, with tau replacing the lower edge when it
/// differs from 0.2. Degenerate bins collapse away.
pub fn default_bins(tau: f64) -> Vec<(f64, f64)> {
    let mut edges = vec![tau, 0.3, 0.5, 1.0];
    edges.retain(|&e| e >= tau);
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if edges.last() != Some(&1.0) {
        edges.push(1.0);
    }
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

fn bin_of(bins: &[(f64, f64)], strength: f64) -> Option<usize> {
    for (i, &(lo, hi)) in bins.iter().enumerate() {
        let last = i == bins.len() - 1;
        if strength >= lo && (strength < hi || (last && strength <= hi)) {
            return Some(i);
        }
    }
    None
}

/// Recall of the hierarchical search against brute-force ground truth,
/// binned by the brute-force effect size.
pub fn recall_by_tier(
    search: &SearchResultSet,
    brute: &SearchResultSet,
    bins: &[(f64, f64)],
) -> BaselineResult<RecallReport> {
    if search.circuit_id != brute.circuit_id {
        return Err(BaselineError::CircuitMismatch(
            search.circuit_id.clone(),
            brute.circuit_id.clone(),
        ));
    }
    if bins.is_empty() || bins.windows(2).any(|w| w[0].1 > w[1].0 + 1e-12) {
        return Err(BaselineError::BadBins);
    }
    let regime = brute
        .records
        .first()
        .or(search.records.first())
        .map(|r| r.regime)
        .unwrap_or(BaselineRegime::Positive);
    let found: std::collections::BTreeSet<NeuronCoord> =
        search.records.iter().map(|r| r.neuron).collect();
    let mut tiers: Vec<TierRecall> = bins
        .iter()
        .map(|&(lo, hi)| TierRecall { lo, hi, recovered: 0, total: 0 })
        .collect();
    let mut overall_recovered = 0;
    let mut overall_total = 0;
    for record in &brute.records {
        let strength = record.effect.strength();
        if let Some(i) = bin_of(bins, strength) {
            tiers[i].total += 1;
            overall_total += 1;
            if found.contains(&record.neuron) {
                tiers[i].recovered += 1;
                overall_recovered += 1;
            }
        }
    }
    let brute_set: std::collections::BTreeSet<NeuronCoord> =
        brute.records.iter().map(|r| r.neuron).collect();
    let search_only: Vec<NeuronCoord> = search
        .records
        .iter()
        .map(|r| r.neuron)
        .filter(|c| !brute_set.contains(c))
        .collect();
    Ok(RecallReport {
        circuit_id: search.circuit_id.clone(),
        regime,
        tiers,
        overall_recovered,
        overall_total,
        search_only,
    })
}

/// Recall rows as CSV, one row per report.
pub fn write_recall_csv<W: std::io::Write>(
    task_id: &str,
    reports: &[RecallReport],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "task".to_string(),
        "circuit".to_string(),
        "regime".to_string(),
        "overall_recovered".to_string(),
        "overall_total".to_string(),
        "overall_pct".to_string(),
    ];
    let n_bins = reports.first().map(|r| r.tiers.len()).unwrap_or(0);
    for i in 0..n_bins {
        header.push(format!("bin{i}_lo"));
        header.push(format!("bin{i}_hi"));
        header.push(format!("bin{i}_recovered"));
        header.push(format!("bin{i}_total"));
        header.push(format!("bin{i}_pct"));
    }
    w.write_record(&header)?;
    let pct = |p: Option<f64>| match p {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "undefined".to_string(),
    };
    for report in reports {
        let mut row = vec![
            task_id.to_string(),
            report.circuit_id.clone(),
            report.regime.to_string(),
            report.overall_recovered.to_string(),
            report.overall_total.to_string(),
            pct(report.overall_percentage()),
        ];
        for tier in &report.tiers {
            row.push(format!("{}", tier.lo));
            row.push(format!("{}", tier.hi));
            row.push(tier.recovered.to_string());
            row.push(tier.total.to_string());
            row.push(pct(tier.percentage()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::SliceTag;
    use crate::localizer::cha_search;
    use crate::oracle::{plant_task, PlantRegimes, PlantSpec, SyntheticOracle};

    fn subset(oracle: &SyntheticOracle, regime: BaselineRegime) -> EvalSubset {
        EvalSubset {
            plus: oracle.task().examples(regime, SliceTag::Associated),
            minus: oracle.task().examples(regime, SliceTag::Unrelated),
        }
    }

    fn record(channel: u32, strength: f64) -> AgonistRecord {
        AgonistRecord::new(
            NeuronCoord::new(0, channel),
            BaselineRegime::Positive,
            GroupEffect::raw(strength, 0.0, 64, 64, 1.0, 1.0),
            0.2,
        )
    }

    #[test]
    fn brute_force_costs_one_evaluation_per_candidate() {
        let task = plant_task(&PlantSpec {
            layer_widths: vec![32],
            agonist_strengths: vec![0.5, 0.3],
            plant_in: PlantRegimes::PositiveOnly,
            seed: 1,
            ..PlantSpec::default()
        })
        .unwrap();
        let oracle = SyntheticOracle::new(task);
        let cands = oracle.candidate_universe()[0].clone();
        let sub = subset(&oracle, BaselineRegime::Positive);
        let before = oracle.query_count();
        let records = brute_force_singletons(
            &cands,
            &oracle,
            &sub,
            BaselineRegime::Positive,
            &SearchConfig::default(),
        )
        .unwrap();
        assert_eq!(oracle.query_count() - before, cands.len() as u64);
        let planted: Vec<NeuronCoord> = oracle
            .task()
            .planted_agonists(BaselineRegime::Positive)
            .iter()
            .map(|p| p.coord)
            .collect();
        let found: Vec<NeuronCoord> = records.iter().map(|r| r.neuron).collect();
        for coord in planted {
            assert!(found.contains(&coord));
        }

        // unreachable threshold finds nothing
        let none = brute_force_singletons(
            &cands,
            &oracle,
            &sub,
            BaselineRegime::Positive,
            &SearchConfig { tau: 1.01, ..SearchConfig::default() },
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn brute_force_matches_ground_truth_exactly_on_exact_subset() {
        let spec = PlantSpec {
            layer_widths: vec![64],
            agonist_strengths: vec![0.55, 0.4, 0.25],
            background_density: 0.4,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 3,
            ..PlantSpec::default()
        };
        let task = plant_task(&spec).unwrap();
        let truth: Vec<NeuronCoord> = task
            .ground_truth_agonists(0.2, BaselineRegime::Positive)
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        let oracle = SyntheticOracle::new(task);
        let sub = subset(&oracle, BaselineRegime::Positive);
        let records = brute_force_singletons(
            &oracle.candidate_universe()[0].clone(),
            &oracle,
            &sub,
            BaselineRegime::Positive,
            &SearchConfig::default(),
        )
        .unwrap();
        let found: Vec<NeuronCoord> = records.iter().map(|r| r.neuron).collect();
        assert_eq!(found, truth);
    }

    #[test]
    fn identical_sets_give_full_recall_and_paper_aggregate_checks_out() {
        let records: Vec<AgonistRecord> =
            vec![record(0, 0.25), record(1, 0.4), record(2, 0.8)];
        let a = SearchResultSet { circuit_id: "c0".into(), records: records.clone() };
        let b = SearchResultSet { circuit_id: "c0".into(), records };
        let report = recall_by_tier(&a, &b, &default_bins(0.2)).unwrap();
        for tier in &report.tiers {
            if tier.total > 0 {
                assert_eq!(tier.percentage(), Some(1.0));
            }
        }
        // 90 of 93 in the strongest tier is 96.8%
        let tier = TierRecall { lo: 0.5, hi: 1.0, recovered: 90, total: 93 };
        assert!((tier.percentage().unwrap() * 100.0 - 96.8).abs() < 0.05);
    }

    #[test]
    fn tiered_recall_against_planted_truth() {
        let spec = PlantSpec {
            layer_widths: vec![256],
            agonist_strengths: vec![0.6; 8],
            overlap: 0.5,
            background_density: 0.0,
            plant_in: PlantRegimes::PositiveOnly,
            seed: 5,
            ..PlantSpec::default()
        };
        let task = plant_task(&spec).unwrap();
        let oracle = SyntheticOracle::new(task);
        let cands = oracle.candidate_universe()[0].clone();
        let sub = subset(&oracle, BaselineRegime::Positive);
        let cfg = SearchConfig::default();
        let cha = cha_search(&cands, &oracle, &sub, BaselineRegime::Positive, &cfg).unwrap();
        let bf =
            brute_force_singletons(&cands, &oracle, &sub, BaselineRegime::Positive, &cfg).unwrap();
        let report = recall_by_tier(
            &SearchResultSet { circuit_id: "c0".into(), records: cha.agonists },
            &SearchResultSet { circuit_id: "c0".into(), records: bf },
            &default_bins(cfg.tau),
        )
        .unwrap();
        let top = report.tiers.last().unwrap();
        assert_eq!((top.recovered, top.total), (8, 8), "8/8 in the top tier");
        assert!(report.search_only.is_empty());
    }

    #[test]
    fn zero_positive_tiers_are_undefined_and_mismatch_errors() {
        let a = SearchResultSet { circuit_id: "c0".into(), records: vec![record(0, 0.25)] };
        let b = SearchResultSet { circuit_id: "c0".into(), records: vec![record(0, 0.25)] };
        let report = recall_by_tier(&a, &b, &default_bins(0.2)).unwrap();
        assert_eq!(report.tiers.last().unwrap().percentage(), None);
        assert_eq!(report.tiers[0].percentage(), Some(1.0));

        let c = SearchResultSet { circuit_id: "c1".into(), records: vec![] };
        assert!(matches!(
            recall_by_tier(&a, &c, &default_bins(0.2)),
            Err(BaselineError::CircuitMismatch(..))
        ));
    }

    #[test]
    fn report_invariant_totals_independent_of_argument_order_roles() {
        // totals always come from the brute-force side
        let search = SearchResultSet {
            circuit_id: "c0".into(),
            records: vec![record(0, 0.25), record(9, 0.9)],
        };
        let brute = SearchResultSet {
            circuit_id: "c0".into(),
            records: vec![record(0, 0.22), record(1, 0.35)],
        };
        let report = recall_by_tier(&search, &brute, &default_bins(0.2)).unwrap();
        assert_eq!(report.overall_total, 2);
        assert_eq!(report.overall_recovered, 1);
        assert_eq!(report.search_only, vec![NeuronCoord::new(0, 9)]);
    }

    #[test]
    fn default_bins_respect_tau() {
        assert_eq!(default_bins(0.2), vec![(0.2, 0.3), (0.3, 0.5), (0.5, 1.0)]);
        assert_eq!(default_bins(0.25), vec![(0.25, 0.3), (0.3, 0.5), (0.5, 1.0)]);
        assert_eq!(default_bins(0.4), vec![(0.4, 0.5), (0.5, 1.0)]);
    }

    #[test]
    fn csv_shape_mirrors_tier_columns() {
        let report = RecallReport {
            circuit_id: "c0".into(),
            regime: BaselineRegime::Positive,
            tiers: vec![
                TierRecall { lo: 0.2, hi: 0.3, recovered: 1, total: 2 },
                TierRecall { lo: 0.3, hi: 0.5, recovered: 0, total: 0 },
            ],
            overall_recovered: 1,
            overall_total: 2,
            search_only: vec![],
        };
        let mut bytes = Vec::new();
        write_recall_csv("demo", &[report], &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("bin1_pct"));
        assert!(text.contains("undefined"));
        assert!(text.contains("50.0"));
    }
}

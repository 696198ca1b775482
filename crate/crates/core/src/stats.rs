//! Exact binomial confidence bounds, feature scoring, filters, and MCC.
//!
//! The Clopper-Pearson bound here is the pruning certificate for the
//! hierarchical search, so it is computed by bisection on the exact binomial
//! tail rather than through a statistics library: every returned bound can be
//! audited against a direct tail-sum evaluation.

use serde::{Deserialize, Serialize};

use crate::effects::GroupEffect;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("successes {x} exceed trials {n}")]
    SuccessesExceedTrials { x: u64, n: u64 },
    #[error("confidence level {0} outside (0, 1)")]
    LevelOutOfRange(f64),
    #[error("zero trials")]
    ZeroTrials,
    #[error("all confusion counts are zero")]
    EmptyConfusion,
    #[error("column and label lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("labels contain a single class; AUC/AP undefined")]
    SingleClass,
    #[error("zero samples on slice {0}")]
    ZeroSamples(&'static str),
}

pub type StatsResult<T> = Result<T, StatsError>;

/// P[X <= x] for X ~ Binomial(n, p), summed in log space so large `n` stays
/// finite.
fn binomial_lower_tail(x: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if x >= n { 1.0 } else { 0.0 };
    }
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let mut ln_choose = 0.0f64; // ln C(n, 0)
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(x as usize + 1);
    for i in 0..=x {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        let t = ln_choose + i as f64 * ln_p + (n - i) as f64 * ln_q;
        max_term = max_term.max(t);
        terms.push(t);
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    (max_term + sum.ln()).exp().min(1.0)
}

/// One-sided Clopper-Pearson upper bound: the smallest `p` such that
/// `P[X <= x; n, p] <= level`, with the `x = n` boundary defined as 1.
///
/// Monotone nondecreasing in `x` and nonincreasing in `level`, and always at
/// least the point estimate `x / n`.
pub fn cp_upper(x: u64, n: u64, level: f64) -> StatsResult<f64> {
    if n == 0 {
        return Err(StatsError::ZeroTrials);
    }
    if x > n {
        return Err(StatsError::SuccessesExceedTrials { x, n });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::LevelOutOfRange(level));
    }
    if x == n {
        return Ok(1.0);
    }
    // tail(p) is continuous and strictly decreasing from 1 at p=0 to 0 at p=1,
    // so bisection converges to the unique inversion point.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_lower_tail(x, n, mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(hi)
}

/// One-sided Clopper-Pearson lower bound, via tail symmetry with [`cp_upper`].
pub fn cp_lower(x: u64, n: u64, level: f64) -> StatsResult<f64> {
    Ok(1.0 - cp_upper(n - x, n, level)?)
}

/// Upper confidence bound on group strength: `max(u+, u-)` where each side is
/// a one-sided Clopper-Pearson bound at level `alpha / 2`.
pub fn group_ucb(effect: &GroupEffect, alpha: f64) -> StatsResult<f64> {
    if effect.n_plus == 0 {
        return Err(StatsError::ZeroSamples("+"));
    }
    if effect.n_minus == 0 {
        return Err(StatsError::ZeroSamples("-"));
    }
    let u_plus = cp_upper(effect.flips_plus(), effect.n_plus, alpha / 2.0)?;
    let u_minus = cp_upper(effect.flips_minus(), effect.n_minus, alpha / 2.0)?;
    Ok(u_plus.max(u_minus))
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation coefficient. Any zero factor under the root yields 0.
pub fn mcc(c: &ConfusionCounts) -> StatsResult<f64> {
    if c.total() == 0 {
        return Err(StatsError::EmptyConfusion);
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// Per-feature scores against a binary label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub auc: f64,
    pub auc_sym: f64,
    pub ap_above_base: f64,
    pub std_gap: f64,
}

const STD_GAP_FLOOR: f64 = 1e-12;

/// AUC (midrank ties), average precision above base rate, and the
/// standardized mean gap of `column` against `labels`.
pub fn feature_scores(column: &[f64], labels: &[bool]) -> StatsResult<FeatureScore> {
    if column.len() != labels.len() {
        return Err(StatsError::LengthMismatch(column.len(), labels.len()));
    }
    if column.len() < 2 {
        return Err(StatsError::TooFewObservations(column.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }

    let auc = auc_midrank(column, labels, n_pos, n_neg);
    let ap = average_precision(column, labels, n_pos);
    let base = n_pos as f64 / labels.len() as f64;

    let mean = |sel: bool| {
        column
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == sel)
            .map(|(&v, _)| v)
            .sum::<f64>()
            / if sel { n_pos as f64 } else { n_neg as f64 }
    };
    let var = |sel: bool, m: f64| {
        column
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == sel)
            .map(|(&v, _)| (v - m) * (v - m))
            .sum::<f64>()
            / if sel { n_pos as f64 } else { n_neg as f64 }
    };
    let (m1, m0) = (mean(true), mean(false));
    let pooled = (0.5 * (var(true, m1) + var(false, m0))).sqrt();
    let std_gap = (m1 - m0) / (pooled + STD_GAP_FLOOR);

    Ok(FeatureScore {
        auc,
        auc_sym: auc.max(1.0 - auc),
        ap_above_base: ap - base,
        std_gap,
    })
}

fn auc_midrank(column: &[f64], labels: &[bool], n_pos: usize, n_neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[a].partial_cmp(&column[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; column.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && column[order[j + 1]] == column[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Average precision with deterministic tie handling: descending score,
/// ascending index within ties.
fn average_precision(column: &[f64], labels: &[bool], n_pos: usize) -> f64 {
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[b].partial_cmp(&column[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / n_pos as f64
}

/// Retention thresholds: a column survives if it passes any of the three
/// score tests. Correlation and MAD-z filters are optional second passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_auc: f64,
    pub min_delta: f64,
    pub min_ap_above_base: f64,
    pub max_abs_corr: Option<f64>,
    pub mad_z: Option<f64>,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_auc: 0.6,
            min_delta: 0.5,
            min_ap_above_base: 0.1,
            max_abs_corr: Some(0.98),
            mad_z: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature_id: usize,
    pub score: FeatureScore,
    pub retained: bool,
    pub drop_reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub rows: Vec<FeatureRow>,
    pub retained: Vec<usize>,
    /// Fixed filter order, recorded so runs are comparable.
    pub order: &'static str,
}

/// Score-based retention, then near-duplicate removal (keeping the
/// earlier-indexed column), then MAD-based variance outlier removal.
pub fn filter_features(
    columns: &[Vec<f64>],
    labels: &[bool],
    thresholds: &FilterThresholds,
) -> StatsResult<FilterReport> {
    let mut rows = Vec::with_capacity(columns.len());
    for (id, col) in columns.iter().enumerate() {
        let score = feature_scores(col, labels)?;
        let passes = score.auc_sym >= thresholds.min_auc
            || score.std_gap.abs() >= thresholds.min_delta
            || score.ap_above_base >= thresholds.min_ap_above_base;
        rows.push(FeatureRow {
            feature_id: id,
            score,
            retained: passes,
            drop_reason: if passes {
                None
            } else {
                Some("below_score_thresholds".into())
            },
        });
    }

    if let Some(max_corr) = thresholds.max_abs_corr {
        let alive: Vec<usize> = rows
            .iter()
            .filter(|r| r.retained)
            .map(|r| r.feature_id)
            .collect();
        for (i, &a) in alive.iter().enumerate() {
            if !rows[a].retained {
                continue;
            }
            for &b in &alive[i + 1..] {
                if !rows[b].retained {
                    continue;
                }
                if pearson(&columns[a], &columns[b]).abs() >= max_corr {
                    rows[b].retained = false;
                    rows[b].drop_reason = Some(format!("near_duplicate_of_{a}"));
                }
            }
        }
    }

    if let Some(z_max) = thresholds.mad_z {
        let alive: Vec<usize> = rows
            .iter()
            .filter(|r| r.retained)
            .map(|r| r.feature_id)
            .collect();
        if alive.len() >= 2 {
            let vars: Vec<f64> = alive.iter().map(|&i| variance(&columns[i])).collect();
            let med = median(&vars);
            let dev: Vec<f64> = vars.iter().map(|v| (v - med).abs()).collect();
            let mad = median(&dev) * 1.4826;
            for (&id, &v) in alive.iter().zip(&vars) {
                let z = (v - med) / (mad + STD_GAP_FLOOR);
                if z > z_max {
                    rows[id].retained = false;
                    rows[id].drop_reason = Some("variance_outlier".into());
                }
            }
        }
    }

    let retained = rows
        .iter()
        .filter(|r| r.retained)
        .map(|r| r.feature_id)
        .collect();
    Ok(FilterReport {
        rows,
        retained,
        order: "scores,duplicates,outliers",
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        // constant columns are perfectly redundant with each other
        return if va == 0.0 && vb == 0.0 { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn variance(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let m = a.iter().sum::<f64>() / n;
    a.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n
}

fn median(a: &[f64]) -> f64 {
    let mut v = a.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Write a feature score table as CSV.
pub fn write_feature_csv<W: std::io::Write>(report: &FilterReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "feature_id",
        "auc",
        "auc_sym",
        "ap_above_base",
        "std_gap",
        "retained",
        "drop_reason",
    ])?;
    for row in &report.rows {
        w.write_record([
            row.feature_id.to_string(),
            format!("{}", row.score.auc),
            format!("{}", row.score.auc_sym),
            format!("{}", row.score.ap_above_base),
            format!("{}", row.score.std_gap),
            row.retained.to_string(),
            row.drop_reason.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_oracles {
    /// Brute-force tail sum by direct pmf recurrence; numerically independent
    /// of the log-space path used by the implementation.
    pub fn binomial_tail_direct(x: u64, n: u64, p: f64) -> f64 {
        if p <= 0.0 {
            return 1.0;
        }
        if p >= 1.0 {
            return if x >= n { 1.0 } else { 0.0 };
        }
        let mut pmf = (1.0 - p).powi(n as i32);
        let mut sum = pmf;
        for i in 0..x {
            pmf *= (n - i) as f64 / (i + 1) as f64 * (p / (1.0 - p));
            sum += pmf;
        }
        sum
    }

    /// Smallest p with tail <= level, by bisection over the direct tail sum.
    pub fn cp_upper_bisect(x: u64, n: u64, level: f64) -> f64 {
        if x == n {
            return 1.0;
        }
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if binomial_tail_direct(x, n, mid) <= level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

//! Splitter and anchored rule extraction: threshold-clause enumeration over
//! predicate matrices, greedy OR-composition maximizing held-out MCC, flip
//! targets, the runtime gate policy, and label-permutation controls.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitset::BitSet;
use crate::coverage::{greedy_k_center, KCenterInit};
use crate::effects::{BaselineRegime, ExampleId, NeuronCoord};
use crate::oracle::{BehaviorOracle, OracleError};
use crate::stats::{mcc, ConfusionCounts};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RulesError {
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("column name {0:?} is not a plain identifier")]
    BadColumnName(String),
    #[error("column {0:?} not present in the matrix")]
    UnknownColumn(String),
    #[error("column lengths disagree with example count")]
    ColumnLengthMismatch,
    #[error("labels contain a single class on the train split")]
    SingleClassLabels,
    #[error("clause pool is empty")]
    EmptyPool,
    #[error("no examples carry baseline label {0}")]
    RegimeEmpty(BaselineRegime),
    #[error("rule references output-derived column {column:?}; gate refused")]
    GateIneligible { column: String },
    #[error("boolean literal applied to real column {0:?} or vice versa")]
    LiteralTypeMismatch(String),
    #[error("operation would read test-split rows before final scoring")]
    TestSplitTouched,
    #[error("rule text parse error: {0}")]
    ParseError(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type RulesResult<T> = Result<T, RulesError>;

/// Where a predicate column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Proposed,
}

/// Train/validation/test assignment. Test labels are read exactly once, at
/// final anchored-rule scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnData {
    Bool(Vec<bool>),
    Real(Vec<f64>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Bool(v) => v.len(),
            ColumnData::Real(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
    pub provenance: Provenance,
    /// Columns computable from the prompt alone are gate-eligible; columns
    /// derived from baseline outputs are diagnostic-only.
    pub prompt_observable: bool,
}

/// Named boolean/real predicate columns over example ids, with mandatory
/// gate-eligibility metadata and per-example split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateMatrix {
    ids: Vec<ExampleId>,
    columns: Vec<Column>,
    splits: Vec<Split>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.chars().next().unwrap().is_ascii_digit()
}

impl PredicateMatrix {
    pub fn new(ids: Vec<ExampleId>, columns: Vec<Column>) -> RulesResult<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for col in &columns {
            if !valid_name(&col.name) {
                return Err(RulesError::BadColumnName(col.name.clone()));
            }
            if !seen.insert(col.name.clone()) {
                return Err(RulesError::DuplicateColumn(col.name.clone()));
            }
            if col.data.len() != ids.len() {
                return Err(RulesError::ColumnLengthMismatch);
            }
        }
        let splits = vec![Split::Train; ids.len()];
        Ok(PredicateMatrix { ids, columns, splits })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn column_index(&self, name: &str) -> RulesResult<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| RulesError::UnknownColumn(name.to_string()))
    }

    pub fn row_of(&self, id: ExampleId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Column values as reals (booleans as 0/1), for scoring and clustering.
    pub fn column_as_real(&self, idx: usize) -> Vec<f64> {
        match &self.columns[idx].data {
            ColumnData::Bool(v) => v.iter().map(|&b| b as u8 as f64).collect(),
            ColumnData::Real(v) => v.clone(),
        }
    }

    /// Copy of the matrix keeping only the given columns; ids and split
    /// assignments are preserved.
    pub fn retain_columns(&self, keep: &[usize]) -> RulesResult<PredicateMatrix> {
        Ok(PredicateMatrix {
            ids: self.ids.clone(),
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            splits: self.splits.clone(),
        })
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> RulesResult<()> {
        if splits.len() != self.n() {
            return Err(RulesError::ColumnLengthMismatch);
        }
        self.splits = splits;
        Ok(())
    }

    /// Assign train/validation/test stratified by k-center clusters in
    /// predicate space, so held-out examples stay diverse.
    pub fn assign_splits_stratified(
        &mut self,
        fractions: (f64, f64, f64),
        clusters: usize,
        seed: u64,
    ) -> RulesResult<()> {
        let points: Vec<Vec<f64>> = (0..self.n())
            .map(|row| {
                (0..self.columns.len())
                    .map(|c| match &self.columns[c].data {
                        ColumnData::Bool(v) => v[row] as u8 as f64,
                        ColumnData::Real(v) => v[row],
                    })
                    .collect()
            })
            .collect();
        let k = clusters.clamp(1, self.n());
        let kc = greedy_k_center(&points, k, KCenterInit::FarthestFromMean)
            .expect("k clamped to point count");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut splits = vec![Split::Train; self.n()];
        for cluster in 0..k {
            let mut members: Vec<usize> =
                (0..self.n()).filter(|&i| kc.assignment[i] == cluster).collect();
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let train_end = (fractions.0 * n).round() as usize;
            let val_end = train_end + ((fractions.1 * n).round() as usize);
            for (pos, &row) in members.iter().enumerate() {
                splits[row] = if pos < train_end {
                    Split::Train
                } else if pos < val_end {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
        }
        // tiny clusters can starve a split; fall back to a global shuffle
        let empty = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .any(|&s| !splits.contains(&s));
        if empty {
            let mut order: Vec<usize> = (0..self.n()).collect();
            order.shuffle(&mut rng);
            let n = self.n() as f64;
            let train_end = (fractions.0 * n).round() as usize;
            let val_end = train_end + ((fractions.1 * n).round() as usize).max(1);
            for (pos, &row) in order.iter().enumerate() {
                splits[row] = if pos < train_end {
                    Split::Train
                } else if pos < val_end {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
        }
        self.splits = splits;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool { column: String, value: bool },
    Real { column: String, cmp: Cmp, threshold: f64 },
}

impl Literal {
    pub fn column(&self) -> &str {
        match self {
            Literal::Bool { column, .. } => column,
            Literal::Real { column, .. } => column,
        }
    }

    fn render(&self) -> String {
        match self {
            Literal::Bool { column, value } => format!("{column} = {value}"),
            Literal::Real { column, cmp, threshold } => {
                let op = match cmp {
                    Cmp::Ge => ">=",
                    Cmp::Le => "<=",
                    Cmp::Eq => "=",
                };
                format!("{column} {op} {threshold}")
            }
        }
    }
}

/// Conjunction of literals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleClause {
    pub literals: Vec<Literal>,
}

impl RuleClause {
    pub fn depth(&self) -> usize {
        self.literals.len()
    }

    pub fn render(&self) -> String {
        let parts: Vec<String> = self.literals.iter().map(|l| l.render()).collect();
        format!("({})", parts.join(" AND "))
    }

    fn eval_row(&self, matrix: &PredicateMatrix, row: usize) -> RulesResult<bool> {
        for literal in &self.literals {
            let idx = matrix.column_index(literal.column())?;
            let hit = match (&matrix.columns[idx].data, literal) {
                (ColumnData::Bool(v), Literal::Bool { value, .. }) => v[row] == *value,
                (ColumnData::Real(v), Literal::Real { cmp, threshold, .. }) => match cmp {
                    Cmp::Ge => v[row] >= *threshold,
                    Cmp::Le => v[row] <= *threshold,
                    Cmp::Eq => v[row] == *threshold,
                },
                _ => return Err(RulesError::LiteralTypeMismatch(literal.column().to_string())),
            };
            if !hit {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Fired mask over the given rows.
    pub fn fires_rows(&self, matrix: &PredicateMatrix, rows: &[usize]) -> RulesResult<Vec<bool>> {
        rows.iter().map(|&r| self.eval_row(matrix, r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleRole {
    Splitter,
    AnchorOneToZero,
    AnchorZeroToOne,
    FakeControl,
}

impl RuleRole {
    pub fn anchor_for(regime: BaselineRegime) -> RuleRole {
        match regime {
            BaselineRegime::Positive => RuleRole::AnchorOneToZero,
            BaselineRegime::Negative => RuleRole::AnchorZeroToOne,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub confusion: ConfusionCounts,
    pub mcc: f64,
}

/// Ordered disjunction of clauses with per-split confusion counts and MCC.
/// The rule fires iff any clause fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub clauses: Vec<RuleClause>,
    pub role: RuleRole,
    pub scores: BTreeMap<String, SplitScore>,
    pub gate_eligible: Option<bool>,
}

impl RuleSet {
    pub fn new(clauses: Vec<RuleClause>, role: RuleRole) -> Self {
        RuleSet { clauses, role, scores: BTreeMap::new(), gate_eligible: None }
    }

    pub fn fires_rows(&self, matrix: &PredicateMatrix, rows: &[usize]) -> RulesResult<Vec<bool>> {
        let mut fired = vec![false; rows.len()];
        for clause in &self.clauses {
            for (slot, &row) in rows.iter().enumerate() {
                if !fired[slot] && clause.eval_row(matrix, row)? {
                    fired[slot] = true;
                }
            }
        }
        Ok(fired)
    }

    pub fn fires_all(&self, matrix: &PredicateMatrix) -> RulesResult<Vec<bool>> {
        let rows: Vec<usize> = (0..matrix.n()).collect();
        self.fires_rows(matrix, &rows)
    }

    /// Score the rule on the given rows and record it under `name`.
    pub fn score_on(
        &mut self,
        matrix: &PredicateMatrix,
        labels: &[bool],
        rows: &[usize],
        name: &str,
    ) -> RulesResult<f64> {
        let fired = self.fires_rows(matrix, rows)?;
        let actual: Vec<bool> = rows.iter().map(|&r| labels[r]).collect();
        let confusion = ConfusionCounts::from_predictions(&fired, &actual);
        let score = mcc(&confusion).unwrap_or(0.0);
        self.scores.insert(name.to_string(), SplitScore { confusion, mcc: score });
        Ok(score)
    }

    /// Human-readable rule language form.
    pub fn to_rule_text(&self) -> String {
        let parts: Vec<String> = self.clauses.iter().map(|c| c.render()).collect();
        format!("IF {} THEN fire", parts.join(" OR "))
    }

    /// Parse the clause structure back from the rule language. Metadata
    /// (role, scores) lives only in the JSON form.
    pub fn parse_rule_text(text: &str) -> RulesResult<Vec<RuleClause>> {
        let err = |msg: &str| RulesError::ParseError(format!("{msg} in {text:?}"));
        let body = text
            .strip_prefix("IF ")
            .and_then(|s| s.strip_suffix(" THEN fire"))
            .ok_or_else(|| err("missing IF/THEN frame"))?;
        let mut clauses = Vec::new();
        for clause_text in body.split(" OR ") {
            let inner = clause_text
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| err("clause not parenthesized"))?;
            let mut literals = Vec::new();
            for lit in inner.split(" AND ") {
                let tokens: Vec<&str> = lit.split_whitespace().collect();
                if tokens.len() != 3 {
                    return Err(err("literal must be `column op value`"));
                }
                let column = tokens[0].to_string();
                if !valid_name(&column) {
                    return Err(err("bad column name"));
                }
                let literal = match (tokens[1], tokens[2]) {
                    ("=", "true") => Literal::Bool { column, value: true },
                    ("=", "false") => Literal::Bool { column, value: false },
                    (op, value) => {
                        let cmp = match op {
                            ">=" => Cmp::Ge,
                            "<=" => Cmp::Le,
                            "=" => Cmp::Eq,
                            _ => return Err(err("unknown comparator")),
                        };
                        let threshold: f64 =
                            value.parse().map_err(|_| err("bad threshold"))?;
                        Literal::Real { column, cmp, threshold }
                    }
                };
                literals.push(literal);
            }
            clauses.push(RuleClause { literals });
        }
        Ok(clauses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnumerationConfig {
    pub max_depth: usize,
    pub beam_width: usize,
    /// Cap on threshold candidates per real column (quantile-subsampled
    /// midpoints).
    pub thresholds_per_column: usize,
}

impl Default for EnumerationConfig {
    fn default() -> Self {
        EnumerationConfig { max_depth: 2, beam_width: 8, thresholds_per_column: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoredClause {
    pub clause: RuleClause,
    pub train_mcc: f64,
    signature: BitSet,
}

impl ScoredClause {
    pub fn signature(&self) -> &BitSet {
        &self.signature
    }
}

/// Clause pool sorted by (train MCC desc, fewer literals, creation order).
#[derive(Debug, Clone, Default)]
pub struct ClausePool {
    pub clauses: Vec<ScoredClause>,
}

fn mcc_from_signature(sig: &BitSet, positives: &BitSet, n: usize) -> f64 {
    let tp = sig.intersection_count(positives) as u64;
    let fp = sig.difference_count(positives) as u64;
    let fn_ = positives.difference_count(sig) as u64;
    let tn = n as u64 - tp - fp - fn_;
    mcc(&ConfusionCounts { tp, tn, fp, fn_ }).unwrap_or(0.0)
}

fn ensure_no_test_rows(matrix: &PredicateMatrix, rows: &[usize]) -> RulesResult<()> {
    if rows.iter().any(|&r| matrix.splits()[r] == Split::Test) {
        return Err(RulesError::TestSplitTouched);
    }
    Ok(())
}

/// Enumerate depth-1 threshold clauses per column, then beam-limited
/// conjunctions up to `max_depth`, deduplicated by fired-example signature
/// and scored by train MCC.
pub fn enumerate_clauses(
    matrix: &PredicateMatrix,
    labels: &[bool],
    train_rows: &[usize],
    cfg: &EnumerationConfig,
) -> RulesResult<ClausePool> {
    ensure_no_test_rows(matrix, train_rows)?;
    let n = train_rows.len();
    let positives = BitSet::from_indices(
        n,
        &train_rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| labels[r])
            .map(|(slot, _)| slot as u32)
            .collect::<Vec<_>>(),
    );
    if positives.count_ones() == 0 || positives.count_ones() == n {
        return Err(RulesError::SingleClassLabels);
    }

    let mut pool: Vec<ScoredClause> = Vec::new();
    let mut seen: Vec<BitSet> = Vec::new();
    let push = |pool: &mut Vec<ScoredClause>, seen: &mut Vec<BitSet>, clause: RuleClause, sig: BitSet| {
        if seen.contains(&sig) {
            return false;
        }
        let train_mcc = mcc_from_signature(&sig, &positives, n);
        seen.push(sig.clone());
        pool.push(ScoredClause { clause, train_mcc, signature: sig });
        true
    };

    // depth-1 clauses
    let mut depth1: Vec<usize> = Vec::new();
    for col in matrix.columns() {
        match &col.data {
            ColumnData::Bool(values) => {
                for value in [true, false] {
                    let sig = BitSet::from_indices(
                        n,
                        &train_rows
                            .iter()
                            .enumerate()
                            .filter(|(_, &r)| values[r] == value)
                            .map(|(slot, _)| slot as u32)
                            .collect::<Vec<_>>(),
                    );
                    let clause = RuleClause {
                        literals: vec![Literal::Bool { column: col.name.clone(), value }],
                    };
                    if push(&mut pool, &mut seen, clause, sig) {
                        depth1.push(pool.len() - 1);
                    }
                }
            }
            ColumnData::Real(values) => {
                let mut distinct: Vec<f64> = train_rows.iter().map(|&r| values[r]).collect();
                distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
                distinct.dedup();
                let mut midpoints: Vec<f64> = distinct
                    .windows(2)
                    .map(|w| 0.5 * (w[0] + w[1]))
                    .collect();
                if midpoints.len() > cfg.thresholds_per_column {
                    let step = midpoints.len() as f64 / cfg.thresholds_per_column as f64;
                    midpoints = (0..cfg.thresholds_per_column)
                        .map(|i| midpoints[(i as f64 * step) as usize])
                        .collect();
                }
                for &threshold in &midpoints {
                    for cmp in [Cmp::Ge, Cmp::Le] {
                        let sig = BitSet::from_indices(
                            n,
                            &train_rows
                                .iter()
                                .enumerate()
                                .filter(|(_, &r)| match cmp {
                                    Cmp::Ge => values[r] >= threshold,
                                    Cmp::Le => values[r] <= threshold,
                                    Cmp::Eq => values[r] == threshold,
                                })
                                .map(|(slot, _)| slot as u32)
                                .collect::<Vec<_>>(),
                        );
                        let clause = RuleClause {
                            literals: vec![Literal::Real {
                                column: col.name.clone(),
                                cmp,
                                threshold,
                            }],
                        };
                        if push(&mut pool, &mut seen, clause, sig) {
                            depth1.push(pool.len() - 1);
                        }
                    }
                }
            }
        }
    }

    // beam-limited conjunctions
    let beam_of = |pool: &[ScoredClause], frontier: &[usize], width: usize| -> Vec<usize> {
        let mut order = frontier.to_vec();
        order.sort_by(|&a, &b| {
            pool[b]
                .train_mcc
                .partial_cmp(&pool[a].train_mcc)
                .unwrap()
                .then(pool[a].clause.depth().cmp(&pool[b].clause.depth()))
                .then(a.cmp(&b))
        });
        order.truncate(width);
        order
    };

    let mut frontier = depth1.clone();
    for _depth in 2..=cfg.max_depth {
        let beam = beam_of(&pool, &frontier, cfg.beam_width);
        let mut next = Vec::new();
        for &bi in &beam {
            for &ai in &depth1 {
                let base = &pool[bi];
                let atom = &pool[ai];
                if base
                    .clause
                    .literals
                    .iter()
                    .any(|l| atom.clause.literals.contains(l))
                {
                    continue;
                }
                let mut sig = base.signature.clone();
                sig.intersect_with(&atom.signature);
                if sig.count_ones() == 0 {
                    continue;
                }
                let mut literals = base.clause.literals.clone();
                literals.extend(atom.clause.literals.iter().cloned());
                if push(&mut pool, &mut seen, RuleClause { literals }, sig) {
                    next.push(pool.len() - 1);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[b]
            .train_mcc
            .partial_cmp(&pool[a].train_mcc)
            .unwrap()
            .then(pool[a].clause.depth().cmp(&pool[b].clause.depth()))
            .then(a.cmp(&b))
    });
    Ok(ClausePool { clauses: order.into_iter().map(|i| pool[i].clone()).collect() })
}

/// Greedy OR-composition: start from the best seed clause by validation MCC
/// and keep adding the clause whose inclusion most increases validation MCC.
/// Ties break toward fewer literals, then earlier pool position.
pub fn greedy_or_compose(
    pool: &ClausePool,
    matrix: &PredicateMatrix,
    labels: &[bool],
    val_rows: &[usize],
    seed_k: usize,
    role: RuleRole,
) -> RulesResult<RuleSet> {
    ensure_no_test_rows(matrix, val_rows)?;
    if pool.clauses.is_empty() {
        return Err(RulesError::EmptyPool);
    }
    let seeds = &pool.clauses[..seed_k.min(pool.clauses.len())];
    let n = val_rows.len();
    let positives = BitSet::from_indices(
        n,
        &val_rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| labels[r])
            .map(|(slot, _)| slot as u32)
            .collect::<Vec<_>>(),
    );
    let val_sigs: Vec<BitSet> = seeds
        .iter()
        .map(|sc| {
            let fired = sc.clause.fires_rows(matrix, val_rows)?;
            Ok(BitSet::from_indices(
                n,
                &fired
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f)
                    .map(|(slot, _)| slot as u32)
                    .collect::<Vec<_>>(),
            ))
        })
        .collect::<RulesResult<_>>()?;

    let score = |sig: &BitSet| mcc_from_signature(sig, &positives, n);
    let pick_best = |candidates: &[(usize, f64)]| -> Option<usize> {
        candidates
            .iter()
            .max_by(|(ia, sa), (ib, sb)| {
                sa.partial_cmp(sb)
                    .unwrap()
                    .then(
                        seeds[*ib]
                            .clause
                            .depth()
                            .cmp(&seeds[*ia].clause.depth()),
                    )
                    .then(ib.cmp(ia))
            })
            .map(|&(i, _)| i)
    };

    let initial: Vec<(usize, f64)> = (0..seeds.len()).map(|i| (i, score(&val_sigs[i]))).collect();
    let first = pick_best(&initial).expect("nonempty seed pool");
    let mut chosen = vec![first];
    let mut current_sig = val_sigs[first].clone();
    let mut current = score(&current_sig);

    loop {
        let candidates: Vec<(usize, f64)> = (0..seeds.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let mut sig = current_sig.clone();
                sig.union_with(&val_sigs[i]);
                (i, score(&sig))
            })
            .filter(|&(_, s)| s > current + 1e-12)
            .collect();
        match pick_best(&candidates) {
            Some(i) => {
                chosen.push(i);
                current_sig.union_with(&val_sigs[i]);
                current = score(&current_sig);
            }
            None => break,
        }
    }

    let clauses = chosen.iter().map(|&i| seeds[i].clause.clone()).collect();
    let mut rule = RuleSet::new(clauses, role);
    let train_rows: Vec<usize> = matrix.rows_in(Split::Train);
    rule.score_on(matrix, labels, &train_rows, "train")?;
    rule.score_on(matrix, labels, val_rows, "validation")?;
    Ok(rule)
}

/// Restrict to examples whose baseline label matches the regime, then
/// partition them by rule verdict: fired ids are the associated slice.
pub fn induce_split(
    rule: &RuleSet,
    matrix: &PredicateMatrix,
    baseline_labels: &[bool],
    regime: BaselineRegime,
) -> RulesResult<(Vec<ExampleId>, Vec<ExampleId>)> {
    let b = regime.label();
    let rows: Vec<usize> = (0..matrix.n()).filter(|&r| baseline_labels[r] == b).collect();
    if rows.is_empty() {
        return Err(RulesError::RegimeEmpty(regime));
    }
    let fired = rule.fires_rows(matrix, &rows)?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (&row, &f) in rows.iter().zip(&fired) {
        if f {
            plus.push(matrix.ids()[row]);
        } else {
            minus.push(matrix.ids()[row]);
        }
    }
    Ok((plus, minus))
}

/// Singleton flip targets: one group evaluation over the whole batch;
/// target is 1 iff the post-ablation outcome differs from the baseline
/// label.
pub fn flip_targets(
    neuron: NeuronCoord,
    oracle: &dyn BehaviorOracle,
    examples: &[ExampleId],
    regime: BaselineRegime,
) -> RulesResult<Vec<bool>> {
    let out = oracle.query_pair(&[neuron], regime, examples, &[])?;
    Ok(out.plus.iter().map(|&o| o != regime.label()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub enumeration: EnumerationConfig,
    pub seed_k: usize,
    pub hq_threshold: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            enumeration: EnumerationConfig::default(),
            seed_k: 12,
            hq_threshold: 0.85,
        }
    }
}

/// Result of anchoring one neuron. A degenerate target vector yields a
/// no-anchor outcome: the neuron stays a validated causal neuron without a
/// symbolic trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorOutcome {
    pub neuron: NeuronCoord,
    pub rule: Option<RuleSet>,
    pub test_mcc: Option<f64>,
    pub high_quality: bool,
    pub degenerate: bool,
}

/// Learn a rule predicting the flip targets. Enumeration and composition see
/// only train/validation rows; the test split is read exactly once, for the
/// final MCC.
pub fn anchor_rule(
    neuron: NeuronCoord,
    targets: &BTreeMap<ExampleId, bool>,
    matrix: &PredicateMatrix,
    regime: BaselineRegime,
    cfg: &AnchorConfig,
) -> RulesResult<AnchorOutcome> {
    let rows: Vec<usize> = (0..matrix.n())
        .filter(|&r| targets.contains_key(&matrix.ids()[r]))
        .collect();
    let labels: Vec<bool> = (0..matrix.n())
        .map(|r| *targets.get(&matrix.ids()[r]).unwrap_or(&false))
        .collect();
    let train_rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| matrix.splits()[r] == Split::Train)
        .collect();
    let val_rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| matrix.splits()[r] == Split::Validation)
        .collect();
    let test_rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| matrix.splits()[r] == Split::Test)
        .collect();

    let no_anchor = |degenerate| AnchorOutcome {
        neuron,
        rule: None,
        test_mcc: None,
        high_quality: false,
        degenerate,
    };
    if train_rows.is_empty() || val_rows.is_empty() {
        return Ok(no_anchor(true));
    }
    let train_pos = train_rows.iter().filter(|&&r| labels[r]).count();
    if train_pos == 0 || train_pos == train_rows.len() {
        return Ok(no_anchor(true));
    }

    let pool = enumerate_clauses(matrix, &labels, &train_rows, &cfg.enumeration)?;
    let mut rule = greedy_or_compose(
        &pool,
        matrix,
        &labels,
        &val_rows,
        cfg.seed_k,
        RuleRole::anchor_for(regime),
    )?;
    let test_mcc = if test_rows.is_empty() {
        None
    } else {
        Some(rule.score_on(matrix, &labels, &test_rows, "test")?)
    };
    let high_quality = test_mcc.map(|m| m >= cfg.hq_threshold).unwrap_or(false);
    Ok(AnchorOutcome {
        neuron,
        rule: Some(rule),
        test_mcc,
        high_quality,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Intervene(NeuronCoord),
    PassThrough,
}

/// One-pass runtime gate: ablate the neuron iff the rule fires. Refuses
/// rules that read output-derived columns, naming the offending column.
pub fn gate_policy(
    rule: &RuleSet,
    neuron: NeuronCoord,
    matrix: &PredicateMatrix,
    row: usize,
) -> RulesResult<GateDecision> {
    for clause in &rule.clauses {
        for literal in &clause.literals {
            let idx = matrix.column_index(literal.column())?;
            if !matrix.columns()[idx].prompt_observable {
                return Err(RulesError::GateIneligible {
                    column: literal.column().to_string(),
                });
            }
        }
    }
    let fired = rule.fires_rows(matrix, &[row])?[0];
    Ok(if fired {
        GateDecision::Intervene(neuron)
    } else {
        GateDecision::PassThrough
    })
}

/// Check gate eligibility without evaluating; used to stamp serialized rules.
pub fn gate_eligible(rule: &RuleSet, matrix: &PredicateMatrix) -> bool {
    rule.clauses.iter().all(|clause| {
        clause.literals.iter().all(|literal| {
            matrix
                .column_index(literal.column())
                .map(|idx| matrix.columns()[idx].prompt_observable)
                .unwrap_or(false)
        })
    })
}

/// Uniformly permuted labels with the original class counts, deterministic
/// per seed. Used as the incorrect-splitter control.
pub fn fake_rule_control(labels: &[bool], seed: u64) -> Vec<bool> {
    let mut permuted = labels.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    permuted.shuffle(&mut rng);
    permuted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bool_col(name: &str, values: Vec<bool>) -> Column {
        Column {
            name: name.into(),
            data: ColumnData::Bool(values),
            provenance: Provenance::Seed,
            prompt_observable: true,
        }
    }

    fn real_col(name: &str, values: Vec<f64>) -> Column {
        Column {
            name: name.into(),
            data: ColumnData::Real(values),
            provenance: Provenance::Proposed,
            prompt_observable: true,
        }
    }

    fn ids(n: usize) -> Vec<ExampleId> {
        (0..n as u32).map(ExampleId).collect()
    }

    fn all_train_rows(matrix: &PredicateMatrix) -> Vec<usize> {
        matrix.rows_in(Split::Train)
    }

    #[test]
    fn matrix_validation() {
        let err = PredicateMatrix::new(
            ids(2),
            vec![bool_col("a", vec![true, false]), bool_col("a", vec![true, false])],
        )
        .unwrap_err();
        assert!(matches!(err, RulesError::DuplicateColumn(_)));
        let err =
            PredicateMatrix::new(ids(2), vec![bool_col("bad name", vec![true, false])]).unwrap_err();
        assert!(matches!(err, RulesError::BadColumnName(_)));
    }

    #[test]
    fn perfect_boolean_column_yields_mcc_one_clause() {
        let labels = vec![true, true, false, false, true, false];
        let matrix =
            PredicateMatrix::new(ids(6), vec![bool_col("flag", labels.clone())]).unwrap();
        let pool =
            enumerate_clauses(&matrix, &labels, &all_train_rows(&matrix), &Default::default())
                .unwrap();
        assert!((pool.clauses[0].train_mcc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_recovery_on_real_column() {
        let values: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let labels: Vec<bool> = values.iter().map(|&v| v >= 5.0).collect();
        let matrix = PredicateMatrix::new(ids(10), vec![real_col("x", values)]).unwrap();
        let pool =
            enumerate_clauses(&matrix, &labels, &all_train_rows(&matrix), &Default::default())
                .unwrap();
        assert!((pool.clauses[0].train_mcc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conjunction_found_at_depth_two() {
        // labels = c1 AND c2 on an 8-example matrix
        let c1 = vec![true, true, true, true, false, false, false, false];
        let c2 = vec![true, false, true, false, true, false, true, false];
        let labels: Vec<bool> = c1.iter().zip(&c2).map(|(&a, &b)| a && b).collect();
        let matrix =
            PredicateMatrix::new(ids(8), vec![bool_col("c1", c1), bool_col("c2", c2)]).unwrap();
        let cfg = EnumerationConfig { max_depth: 2, beam_width: 2, thresholds_per_column: 32 };
        let pool = enumerate_clauses(&matrix, &labels, &all_train_rows(&matrix), &cfg).unwrap();
        let best = &pool.clauses[0];
        assert!((best.train_mcc - 1.0).abs() < 1e-12);
        assert_eq!(best.clause.depth(), 2);
    }

    #[test]
    fn single_class_labels_error() {
        let matrix =
            PredicateMatrix::new(ids(4), vec![bool_col("a", vec![true; 4])]).unwrap();
        let err = enumerate_clauses(&matrix, &[true; 4], &all_train_rows(&matrix), &Default::default())
            .unwrap_err();
        assert_eq!(err, RulesError::SingleClassLabels);
    }

    fn split_matrix(matrix: &mut PredicateMatrix, n_train: usize, n_val: usize) {
        let n = matrix.n();
        let splits: Vec<Split> = (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Validation
                } else {
                    Split::Test
                }
            })
            .collect();
        matrix.set_splits(splits).unwrap();
    }

    #[test]
    fn or_composition_recovers_disjunction() {
        // labels = c1 OR c2
        let n = 24;
        let c1: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let c2: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let labels: Vec<bool> = c1.iter().zip(&c2).map(|(&a, &b)| a || b).collect();
        let mut matrix =
            PredicateMatrix::new(ids(n), vec![bool_col("c1", c1), bool_col("c2", c2)]).unwrap();
        split_matrix(&mut matrix, 16, 8);
        let train = matrix.rows_in(Split::Train);
        let val = matrix.rows_in(Split::Validation);
        let pool = enumerate_clauses(&matrix, &labels, &train, &Default::default()).unwrap();
        let rule =
            greedy_or_compose(&pool, &matrix, &labels, &val, 6, RuleRole::Splitter).unwrap();
        assert!((rule.scores["validation"].mcc - 1.0).abs() < 1e-12);
        assert!(rule.clauses.len() >= 2, "needs both clauses to cover the OR");
    }

    #[test]
    fn composition_never_below_best_single_clause() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 40;
            let cols: Vec<Column> = (0..4)
                .map(|c| bool_col(&format!("c{c}"), (0..n).map(|_| rng.gen_bool(0.4)).collect()))
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let mut matrix = PredicateMatrix::new(ids(n), cols).unwrap();
            split_matrix(&mut matrix, 24, 16);
            let train = matrix.rows_in(Split::Train);
            let val = matrix.rows_in(Split::Validation);
            if labels[..24].iter().all(|&l| l) || labels[..24].iter().all(|&l| !l) {
                continue;
            }
            let pool = enumerate_clauses(&matrix, &labels, &train, &Default::default()).unwrap();
            let rule =
                greedy_or_compose(&pool, &matrix, &labels, &val, 8, RuleRole::Splitter).unwrap();
            let best_single = pool.clauses[..8.min(pool.clauses.len())]
                .iter()
                .map(|sc| {
                    let mut single = RuleSet::new(vec![sc.clause.clone()], RuleRole::Splitter);
                    single.score_on(&matrix, &labels, &val, "validation").unwrap()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(rule.scores["validation"].mcc >= best_single - 1e-12);
        }
    }

    #[test]
    fn greedy_close_to_exhaustive_or_subset() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ok = 0;
        let trials = 30;
        for _ in 0..trials {
            let n = 30;
            let cols: Vec<Column> = (0..5)
                .map(|c| bool_col(&format!("c{c}"), (0..n).map(|_| rng.gen_bool(0.35)).collect()))
                .collect();
            let labels: Vec<bool> = {
                // labels loosely driven by two of the columns plus noise
                let c0: Vec<bool> = match &cols[0].data {
                    ColumnData::Bool(v) => v.clone(),
                    _ => unreachable!(),
                };
                let c1: Vec<bool> = match &cols[1].data {
                    ColumnData::Bool(v) => v.clone(),
                    _ => unreachable!(),
                };
                (0..n)
                    .map(|i| (c0[i] || c1[i]) != rng.gen_bool(0.1))
                    .collect()
            };
            let mut matrix = PredicateMatrix::new(ids(n), cols).unwrap();
            split_matrix(&mut matrix, 18, 12);
            let train = matrix.rows_in(Split::Train);
            let val = matrix.rows_in(Split::Validation);
            if labels[..18].iter().all(|&l| l) || labels[..18].iter().all(|&l| !l) {
                ok += 1;
                continue;
            }
            let cfg = EnumerationConfig { max_depth: 1, beam_width: 4, thresholds_per_column: 8 };
            let pool = enumerate_clauses(&matrix, &labels, &train, &cfg).unwrap();
            let k = pool.clauses.len().min(10);
            let rule =
                greedy_or_compose(&pool, &matrix, &labels, &val, k, RuleRole::Splitter).unwrap();
            // exhaustive best OR-subset over the same seed pool
            let mut best = f64::NEG_INFINITY;
            for mask in 1u32..(1 << k) {
                let clauses: Vec<RuleClause> = (0..k)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| pool.clauses[i].clause.clone())
                    .collect();
                let mut candidate = RuleSet::new(clauses, RuleRole::Splitter);
                let m = candidate.score_on(&matrix, &labels, &val, "validation").unwrap();
                best = best.max(m);
            }
            if rule.scores["validation"].mcc >= best - 0.05 {
                ok += 1;
            } else {
                eprintln!(
                    "greedy deficit: {} vs exhaustive {}",
                    rule.scores["validation"].mcc, best
                );
            }
        }
        assert!(ok as f64 >= 0.9 * trials as f64, "greedy within 0.05 on {ok}/{trials}");
    }

    #[test]
    fn induce_split_partitions_regime() {
        let n = 12;
        let marker: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let matrix = PredicateMatrix::new(ids(n), vec![bool_col("m", marker.clone())]).unwrap();
        let baseline: Vec<bool> = (0..n).map(|i| i < 8).collect();
        let rule = RuleSet::new(
            vec![RuleClause { literals: vec![Literal::Bool { column: "m".into(), value: true }] }],
            RuleRole::Splitter,
        );
        let (plus, minus) = induce_split(&rule, &matrix, &baseline, BaselineRegime::Positive).unwrap();
        assert_eq!(plus.len() + minus.len(), 8);
        assert!(plus.iter().all(|id| marker[id.0 as usize]));

        // constant-true rule leaves the unrelated slice empty
        let always = RuleSet::new(
            vec![RuleClause { literals: vec![Literal::Bool { column: "m".into(), value: true }] },
                 RuleClause { literals: vec![Literal::Bool { column: "m".into(), value: false }] }],
            RuleRole::Splitter,
        );
        let (_, minus) = induce_split(&always, &matrix, &baseline, BaselineRegime::Positive).unwrap();
        assert!(minus.is_empty());

        let err = induce_split(&rule, &matrix, &vec![true; n], BaselineRegime::Negative).unwrap_err();
        assert!(matches!(err, RulesError::RegimeEmpty(_)));
    }

    #[test]
    fn fake_control_preserves_class_counts() {
        let labels: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let permuted = fake_rule_control(&labels, 9);
        assert_eq!(
            labels.iter().filter(|&&l| l).count(),
            permuted.iter().filter(|&&l| l).count()
        );
        assert_ne!(labels, permuted, "permutation differs from identity");
        assert_eq!(permuted, fake_rule_control(&labels, 9), "seeded determinism");
    }

    #[test]
    fn gate_refuses_output_derived_columns() {
        let mut hidden = real_col("conf", vec![0.1, 0.9]);
        hidden.prompt_observable = false;
        let matrix = PredicateMatrix::new(
            ids(2),
            vec![bool_col("visible", vec![true, false]), hidden],
        )
        .unwrap();
        let neuron = NeuronCoord::new(0, 0);
        let ok_rule = RuleSet::new(
            vec![RuleClause {
                literals: vec![Literal::Bool { column: "visible".into(), value: true }],
            }],
            RuleRole::AnchorZeroToOne,
        );
        assert_eq!(
            gate_policy(&ok_rule, neuron, &matrix, 0).unwrap(),
            GateDecision::Intervene(neuron)
        );
        assert_eq!(
            gate_policy(&ok_rule, neuron, &matrix, 1).unwrap(),
            GateDecision::PassThrough
        );
        let bad_rule = RuleSet::new(
            vec![RuleClause {
                literals: vec![Literal::Real { column: "conf".into(), cmp: Cmp::Ge, threshold: 0.5 }],
            }],
            RuleRole::AnchorZeroToOne,
        );
        let err = gate_policy(&bad_rule, neuron, &matrix, 0).unwrap_err();
        assert_eq!(err, RulesError::GateIneligible { column: "conf".into() });
        assert!(!gate_eligible(&bad_rule, &matrix));
    }

    #[test]
    fn rule_text_round_trip_is_exact() {
        let rule = RuleSet::new(
            vec![
                RuleClause {
                    literals: vec![
                        Literal::Real { column: "col".into(), cmp: Cmp::Ge, threshold: 3.5 },
                        Literal::Bool { column: "flag_a".into(), value: true },
                    ],
                },
                RuleClause {
                    literals: vec![Literal::Bool { column: "col2".into(), value: true }],
                },
                RuleClause {
                    literals: vec![Literal::Real {
                        column: "z".into(),
                        cmp: Cmp::Le,
                        threshold: 0.1234567890123,
                    }],
                },
            ],
            RuleRole::Splitter,
        );
        let text = rule.to_rule_text();
        assert_eq!(
            text,
            "IF (col >= 3.5 AND flag_a = true) OR (col2 = true) OR (z <= 0.1234567890123) THEN fire"
        );
        let parsed = RuleSet::parse_rule_text(&text).unwrap();
        assert_eq!(parsed, rule.clauses);
        let again = RuleSet::new(parsed, RuleRole::Splitter).to_rule_text();
        assert_eq!(again, text);

        // JSON form round-trips through serde
        let json = serde_json::to_string(&rule).unwrap();
        let back: RuleSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rule);
    }

    #[test]
    fn rule_text_parse_errors() {
        assert!(RuleSet::parse_rule_text("nonsense").is_err());
        assert!(RuleSet::parse_rule_text("IF col >= 3 THEN fire").is_err());
        assert!(RuleSet::parse_rule_text("IF (col ~ 3) THEN fire").is_err());
    }

    #[test]
    fn test_split_isolation_is_enforced() {
        let n = 9;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mut matrix =
            PredicateMatrix::new(ids(n), vec![bool_col("a", labels.clone())]).unwrap();
        split_matrix(&mut matrix, 4, 3);
        let mut rows = matrix.rows_in(Split::Train);
        rows.extend(matrix.rows_in(Split::Test));
        let err =
            enumerate_clauses(&matrix, &labels, &rows, &Default::default()).unwrap_err();
        assert_eq!(err, RulesError::TestSplitTouched);
    }

    #[test]
    fn rule_evaluation_is_pure() {
        let n = 10;
        let values: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let matrix = PredicateMatrix::new(ids(n), vec![real_col("x", values)]).unwrap();
        let rule = RuleSet::new(
            vec![RuleClause {
                literals: vec![Literal::Real { column: "x".into(), cmp: Cmp::Ge, threshold: 4.5 }],
            }],
            RuleRole::Splitter,
        );
        let all: Vec<usize> = (0..n).collect();
        let batched = rule.fires_rows(&matrix, &all).unwrap();
        for (i, &row) in all.iter().enumerate().rev() {
            let single = rule.fires_rows(&matrix, &[row]).unwrap()[0];
            assert_eq!(single, batched[i]);
        }
    }

    #[test]
    fn stratified_splits_partition_and_cover() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let cols = vec![
            real_col("x", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            real_col("y", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let mut matrix = PredicateMatrix::new(ids(n), cols).unwrap();
        matrix.assign_splits_stratified((0.6, 0.2, 0.2), 6, 7).unwrap();
        let train = matrix.rows_in(Split::Train).len();
        let val = matrix.rows_in(Split::Validation).len();
        let test = matrix.rows_in(Split::Test).len();
        assert_eq!(train + val + test, n);
        assert!(train > 0 && val > 0 && test > 0);
        assert!((train as f64 / n as f64 - 0.6).abs() < 0.15);
    }
}

//! Candidate reduction: pluggable scorers producing ranked coordinates,
//! an integrated-gradients scorer over closed-form synthetic surrogates,
//! and per-layer retention with element filtering.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{BaselineRegime, NeuronCoord, SliceTag};
use crate::oracle::{PlantedRole, SyntheticTask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CandidatesError {
    #[error("activation dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("integration steps must be at least 1")]
    ZeroSteps,
    #[error("no activation pairs supplied")]
    NoPairs,
    #[error("retention budget must be at least 1")]
    ZeroBudget,
}

pub type CandidatesResult<T> = Result<T, CandidatesError>;

/// Differentiable scalar objective over activation vectors, with
/// closed-form gradients.
pub trait Surrogate {
    fn dim(&self) -> usize;
    fn value(&self, h: &[f64]) -> f64;
    fn grad(&self, h: &[f64]) -> Vec<f64>;
}

/// L(h) = w . h; integrated gradients are exact for any step count.
pub struct LinearSurrogate {
    pub weights: Vec<f64>,
}

impl Surrogate for LinearSurrogate {
    fn dim(&self) -> usize {
        self.weights.len()
    }
    fn value(&self, h: &[f64]) -> f64 {
        self.weights.iter().zip(h).map(|(w, x)| w * x).sum()
    }
    fn grad(&self, _h: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// L(h) = 1/2 h^T diag(q) h + w . h.
pub struct QuadraticSurrogate {
    pub quad: Vec<f64>,
    pub linear: Vec<f64>,
}

impl Surrogate for QuadraticSurrogate {
    fn dim(&self) -> usize {
        self.linear.len()
    }
    fn value(&self, h: &[f64]) -> f64 {
        h.iter()
            .zip(&self.quad)
            .zip(&self.linear)
            .map(|((x, q), w)| 0.5 * q * x * x + w * x)
            .sum()
    }
    fn grad(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.quad)
            .zip(&self.linear)
            .map(|((x, q), w)| q * x + w)
            .collect()
    }
}

/// L(h) = sum_i exp(w_i h_i); smooth but not polynomial, so the midpoint
/// Riemann sum carries a step-dependent error.
pub struct ExpSurrogate {
    pub weights: Vec<f64>,
}

impl Surrogate for ExpSurrogate {
    fn dim(&self) -> usize {
        self.weights.len()
    }
    fn value(&self, h: &[f64]) -> f64 {
        self.weights.iter().zip(h).map(|(w, x)| (w * x).exp()).sum()
    }
    fn grad(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(h)
            .map(|(w, x)| w * (w * x).exp())
            .collect()
    }
}

/// One matched example pair's activation vectors.
#[derive(Debug, Clone)]
pub struct ActivationPair {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

/// Midpoint-rule integrated gradients along the straight path from each
/// pair's minus activations to its plus activations, averaged over pairs in
/// a fixed summation order.
pub fn ig_surrogate_score(
    surrogate: &dyn Surrogate,
    pairs: &[ActivationPair],
    steps: usize,
) -> CandidatesResult<Vec<f64>> {
    if steps == 0 {
        return Err(CandidatesError::ZeroSteps);
    }
    if pairs.is_empty() {
        return Err(CandidatesError::NoPairs);
    }
    let dim = surrogate.dim();
    let mut scores = vec![0.0; dim];
    for pair in pairs {
        if pair.plus.len() != dim || pair.minus.len() != dim {
            return Err(CandidatesError::DimensionMismatch {
                expected: dim,
                got: pair.plus.len().max(pair.minus.len()),
            });
        }
        let delta: Vec<f64> = pair
            .plus
            .iter()
            .zip(&pair.minus)
            .map(|(p, m)| p - m)
            .collect();
        let mut point = vec![0.0; dim];
        for s in 0..steps {
            let alpha = (s as f64 + 0.5) / steps as f64;
            for i in 0..dim {
                point[i] = pair.minus[i] + alpha * delta[i];
            }
            let g = surrogate.grad(&point);
            for i in 0..dim {
                scores[i] += g[i] * delta[i] / steps as f64;
            }
        }
    }
    for s in &mut scores {
        *s /= pairs.len() as f64;
    }
    Ok(scores)
}

/// Ranked candidate coordinates, sorted by |score| descending with ties
/// broken by coordinate order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRanking {
    pub entries: Vec<RankedCoord>,
    pub budget: usize,
    pub scorer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCoord {
    pub coord: NeuronCoord,
    pub score: f64,
}

impl CandidateRanking {
    pub fn from_scores(
        mut entries: Vec<RankedCoord>,
        budget: usize,
        scorer: impl Into<String>,
    ) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .abs()
                .partial_cmp(&a.score.abs())
                .unwrap()
                .then(a.coord.cmp(&b.coord))
        });
        CandidateRanking {
            entries,
            budget,
            scorer: scorer.into(),
        }
    }
}

/// Retained candidate sets, grouped by layer in global-rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub per_layer: Vec<(u16, Vec<NeuronCoord>)>,
    pub realized: usize,
}

impl Retention {
    pub fn all_coords(&self) -> Vec<NeuronCoord> {
        self.per_layer
            .iter()
            .flat_map(|(_, coords)| coords.iter().copied())
            .collect()
    }
}

/// Apply the element filter, keep the top `m` by |score|, then group by
/// layer preserving score order. The realized count may be below `m` after
/// filtering.
pub fn retain_top(
    ranking: &CandidateRanking,
    m: usize,
    element_filter: &dyn Fn(&NeuronCoord) -> bool,
) -> CandidatesResult<Retention> {
    if m == 0 {
        return Err(CandidatesError::ZeroBudget);
    }
    let kept: Vec<NeuronCoord> = ranking
        .entries
        .iter()
        .filter(|e| element_filter(&e.coord))
        .take(m)
        .map(|e| e.coord)
        .collect();
    let mut per_layer: Vec<(u16, Vec<NeuronCoord>)> = Vec::new();
    for coord in &kept {
        match per_layer.iter_mut().find(|(layer, _)| *layer == coord.layer) {
            Some((_, coords)) => coords.push(*coord),
            None => per_layer.push((coord.layer, vec![*coord])),
        }
    }
    per_layer.sort_by_key(|(layer, _)| *layer);
    Ok(Retention {
        realized: kept.len(),
        per_layer,
    })
}

/// Controlled-recall reducer: keeps all planted agonists except a seeded
/// `leak_rate` fraction (deliberately dropped and recorded), padded with
/// background coordinates up to `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducerOutcome {
    pub retention: Retention,
    pub dropped: Vec<NeuronCoord>,
}

pub fn ground_truth_reducer(
    task: &SyntheticTask,
    m: usize,
    leak_rate: f64,
    seed: u64,
) -> CandidatesResult<ReducerOutcome> {
    if m == 0 {
        return Err(CandidatesError::ZeroBudget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted: Vec<NeuronCoord> = task
        .planted()
        .iter()
        .filter(|p| p.role == PlantedRole::Agonist)
        .map(|p| p.coord)
        .collect();
    planted.sort();
    planted.dedup();
    let drop_count = (leak_rate * planted.len() as f64).round() as usize;
    let mut shuffled = planted.clone();
    shuffled.shuffle(&mut rng);
    let mut dropped: Vec<NeuronCoord> = shuffled.into_iter().take(drop_count).collect();
    dropped.sort();

    let mut retained: Vec<NeuronCoord> = planted
        .iter()
        .filter(|c| !dropped.contains(c))
        .copied()
        .collect();
    let mut background: Vec<NeuronCoord> = task
        .universe()
        .iter()
        .flatten()
        .filter(|c| !planted.contains(c))
        .copied()
        .collect();
    background.shuffle(&mut rng);
    for coord in background {
        if retained.len() >= m {
            break;
        }
        retained.push(coord);
    }
    retained.truncate(m);
    retained.sort();

    let mut per_layer: Vec<(u16, Vec<NeuronCoord>)> = Vec::new();
    for coord in &retained {
        match per_layer.iter_mut().find(|(layer, _)| *layer == coord.layer) {
            Some((_, coords)) => coords.push(*coord),
            None => per_layer.push((coord.layer, vec![*coord])),
        }
    }
    per_layer.sort_by_key(|(layer, _)| *layer);
    Ok(ReducerOutcome {
        retention: Retention {
            realized: retained.len(),
            per_layer,
        },
        dropped,
    })
}

/// Synthetic activation pairs for a planted task: each coordinate's
/// activation delta reflects whether the paired associated example sits in
/// that neuron's flip set, plus background noise. Scored with a linear
/// surrogate this separates planted agonists from background by
/// construction.
pub fn ig_rank_task(
    task: &SyntheticTask,
    regime: BaselineRegime,
    n_pairs: usize,
    steps: usize,
    seed: u64,
) -> CandidatesResult<CandidateRanking> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<NeuronCoord> = task.universe().iter().flatten().copied().collect();
    let dim = coords.len();
    let plus_ids = task.examples(regime, SliceTag::Associated);

    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x_plus = plus_ids[rng.gen_range(0..plus_ids.len())];
        let mut minus = Vec::with_capacity(dim);
        let mut plus = Vec::with_capacity(dim);
        for &coord in &coords {
            let base: f64 = rng.gen_range(-0.05..0.05);
            let fires = task.flips_example(coord, x_plus).unwrap_or(false);
            minus.push(base);
            plus.push(base + if fires { 1.0 } else { rng.gen_range(-0.02..0.02) });
        }
        pairs.push(ActivationPair { plus, minus });
    }

    let surrogate = LinearSurrogate { weights: vec![1.0; dim] };
    let scores = ig_surrogate_score(&surrogate, &pairs, steps)?;
    let entries = coords
        .into_iter()
        .zip(scores)
        .map(|(coord, score)| RankedCoord { coord, score })
        .collect();
    Ok(CandidateRanking::from_scores(entries, dim, "ig-surrogate"))
}

/// Write a ranking as CSV with retention flags.
pub fn write_ranking_csv<W: std::io::Write>(
    ranking: &CandidateRanking,
    retention: &Retention,
    out: W,
) -> csv::Result<()> {
    let retained: std::collections::BTreeSet<NeuronCoord> =
        retention.all_coords().into_iter().collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["coord", "score", "retained", "scorer"])?;
    for e in &ranking.entries {
        w.write_record([
            e.coord.to_string(),
            format!("{}", e.score),
            retained.contains(&e.coord).to_string(),
            ranking.scorer.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Spectral compression and representative sampling: PCA embedding, greedy
//! k-center, per-slice medoid selection, matched controls, and coverage
//! diagnostics, plus the random-plan baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{BaselineRegime, ExampleId, SliceTag};
use crate::oracle::{PlantedRole, SyntheticTask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CoverageError {
    #[error("need at least 2 rows for PCA, got {0}")]
    TooFewRows(usize),
    #[error("requested dimension {requested} exceeds min(n={n}, d={d})")]
    DimensionTooLarge { requested: usize, n: usize, d: usize },
    #[error("k = {k} exceeds the number of points {n}")]
    TooManyCenters { k: usize, n: usize },
    #[error("no points supplied")]
    NoPoints,
    #[error("slice is empty")]
    EmptySlice,
    #[error("n_sel = {n_sel} exceeds slice size {n}")]
    SelectionTooLarge { n_sel: usize, n: usize },
}

pub type CoverageResult<T> = Result<T, CoverageError>;

/// Raw embedding rows with ids and optional per-example length scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub ids: Vec<ExampleId>,
    pub rows: Vec<Vec<f64>>,
    pub lengths: Option<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn index_of(&self, id: ExampleId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// PCA projection result. `rows` are the unit-normalized projections used by
/// everything downstream; `projected`, `components`, and `mean` are kept so
/// reconstruction is checkable.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub rows: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: f64,
    pub realized_dim: usize,
    /// Set when the data rank fell below the requested dimension.
    pub warning: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Project onto the top principal directions of the mean-centered matrix via
/// power iteration with deflation, fix component signs so the
/// largest-magnitude loading is positive, then scale rows to unit norm
/// (zero rows stay zero).
pub fn pca_embed(matrix: &EmbeddingMatrix, d_pca: usize) -> CoverageResult<PcaResult> {
    let n = matrix.rows.len();
    if n < 2 {
        return Err(CoverageError::TooFewRows(n));
    }
    let d = matrix.rows[0].len();
    if d_pca > n.min(d) || d_pca == 0 {
        return Err(CoverageError::DimensionTooLarge { requested: d_pca, n, d });
    }

    let mut mean = vec![0.0; d];
    for row in &matrix.rows {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = matrix
        .rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // covariance (d x d)
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut warning = None;
    for comp in 0..d_pca {
        // deterministic start: unit basis at the largest remaining diagonal
        let start = (0..d)
            .max_by(|&a, &b| cov[a][a].partial_cmp(&cov[b][b]).unwrap())
            .unwrap();
        let mut v = vec![0.0; d];
        v[start] = 1.0;
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut next = vec![0.0; d];
            for i in 0..d {
                next[i] = dot(&cov[i], &v);
            }
            // re-orthogonalize against found components so the basis stays
            // orthonormal even under slow eigengap convergence
            for c in &components {
                let proj = dot(&next, c);
                for (x, ci) in next.iter_mut().zip(c) {
                    *x -= proj * ci;
                }
            }
            let len = norm(&next);
            if len < 1e-14 {
                break;
            }
            for x in &mut next {
                *x /= len;
            }
            let new_lambda: f64 = {
                let mut cv = vec![0.0; d];
                for i in 0..d {
                    cv[i] = dot(&cov[i], &next);
                }
                dot(&next, &cv)
            };
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = next;
            lambda = new_lambda;
            if delta < 1e-14 {
                break;
            }
        }
        if lambda <= total_variance * 1e-12 + 1e-300 {
            warning = Some(format!(
                "rank deficiency: requested {d_pca} components, data supports {comp}"
            ));
            break;
        }
        // sign convention: largest-magnitude loading positive
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap();
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        // deflate
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }

    let realized_dim = components.len();
    let projected: Vec<Vec<f64>> = centered
        .iter()
        .map(|row| components.iter().map(|c| dot(row, c)).collect())
        .collect();
    let rows = projected
        .iter()
        .map(|p| {
            let len = norm(p);
            if len < 1e-300 {
                p.clone()
            } else {
                p.iter().map(|x| x / len).collect()
            }
        })
        .collect();
    let explained_variance_ratio = if total_variance > 0.0 {
        eigenvalues.iter().sum::<f64>() / total_variance
    } else {
        0.0
    };
    Ok(PcaResult {
        rows,
        projected,
        components,
        mean,
        eigenvalues,
        explained_variance_ratio,
        realized_dim,
        warning,
    })
}

/// How the first k-center seed is chosen. The deterministic default takes
/// the point farthest from the dataset mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KCenterInit {
    FarthestFromMean,
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCenterResult {
    pub centers: Vec<usize>,
    pub assignment: Vec<usize>,
    pub radius: f64,
}

/// Farthest-first traversal: each new center is the point farthest from the
/// current center set, ties broken by lowest index.
pub fn greedy_k_center(
    points: &[Vec<f64>],
    k: usize,
    init: KCenterInit,
) -> CoverageResult<KCenterResult> {
    let n = points.len();
    if n == 0 {
        return Err(CoverageError::NoPoints);
    }
    if k > n || k == 0 {
        return Err(CoverageError::TooManyCenters { k, n });
    }
    let first = match init {
        KCenterInit::Seeded(seed) => {
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
        }
        KCenterInit::FarthestFromMean => {
            let d = points[0].len();
            let mut mean = vec![0.0; d];
            for p in points {
                for (m, &x) in mean.iter_mut().zip(p) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            argmax_distance(points, &mean)
        }
    };
    let mut centers = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| euclidean(p, &points[first])).collect();
    let mut assignment = vec![0usize; n];
    while centers.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        let c = centers.len();
        centers.push(next);
        for i in 0..n {
            let d = euclidean(&points[i], &points[next]);
            if d < dist[i] {
                dist[i] = d;
                assignment[i] = c;
            }
        }
    }
    let radius = dist.iter().cloned().fold(0.0, f64::max);
    Ok(KCenterResult { centers, assignment, radius })
}

fn argmax_distance(points: &[Vec<f64>], target: &[f64]) -> usize {
    (0..points.len())
        .max_by(|&a, &b| {
            euclidean(&points[a], target)
                .partial_cmp(&euclidean(&points[b], target))
                .unwrap()
                .then(b.cmp(&a))
        })
        .unwrap()
}

/// Pick at most one medoid per occupied global cluster in decreasing
/// occupancy order, stopping at `n_sel`; if clusters run out first, fill
/// uniformly at random (seeded) from the unselected slice members.
pub fn select_representatives(
    slice_members: &[usize],
    assignment: &[usize],
    points: &[Vec<f64>],
    n_sel: usize,
    seed: u64,
) -> CoverageResult<Vec<usize>> {
    if slice_members.is_empty() {
        return Err(CoverageError::EmptySlice);
    }
    if n_sel >= slice_members.len() {
        return Ok(slice_members.to_vec());
    }
    // occupancy per cluster, restricted to the slice
    let mut by_cluster: Vec<(usize, Vec<usize>)> = Vec::new();
    for &idx in slice_members {
        let cluster = assignment[idx];
        match by_cluster.iter_mut().find(|(c, _)| *c == cluster) {
            Some((_, members)) => members.push(idx),
            None => by_cluster.push((cluster, vec![idx])),
        }
    }
    by_cluster.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut selected = Vec::with_capacity(n_sel);
    for (_, members) in &by_cluster {
        if selected.len() >= n_sel {
            break;
        }
        // slice medoid of the cluster: minimum summed distance to members
        let medoid = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let sa: f64 = members.iter().map(|&m| euclidean(&points[a], &points[m])).sum();
                let sb: f64 = members.iter().map(|&m| euclidean(&points[b], &points[m])).sum();
                sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        selected.push(medoid);
    }
    if selected.len() < n_sel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rest: Vec<usize> = slice_members
            .iter()
            .copied()
            .filter(|i| !selected.contains(i))
            .collect();
        rest.shuffle(&mut rng);
        selected.extend(rest.into_iter().take(n_sel - selected.len()));
    }
    Ok(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// (associated index, unrelated index) pairs, associated ascending.
    pub pairs: Vec<(usize, usize)>,
    /// Pairs that fell back to an unconstrained nearest neighbor.
    pub fallback: usize,
    /// Set when the pool was smaller than the selected set.
    pub truncated: bool,
}

/// Greedy nearest-neighbor matching in embedding space subject to a relative
/// length tolerance, without replacement. When no candidate passes the
/// length constraint the nearest unconstrained candidate is used and
/// flagged.
pub fn match_controls(
    selected_plus: &[usize],
    pool_minus: &[usize],
    points: &[Vec<f64>],
    lengths: Option<&[f64]>,
    length_tolerance: f64,
) -> MatchOutcome {
    let mut order: Vec<usize> = selected_plus.to_vec();
    order.sort_unstable();
    let mut available: Vec<usize> = pool_minus.to_vec();
    let mut pairs = Vec::with_capacity(order.len());
    let mut fallback = 0;
    let truncated = pool_minus.len() < order.len();
    for &sel in &order {
        if available.is_empty() {
            break;
        }
        let length_ok = |cand: usize| match lengths {
            Some(ls) => {
                let a = ls[sel];
                let b = ls[cand];
                let scale = a.abs().max(1e-12);
                (a - b).abs() / scale <= length_tolerance
            }
            None => true,
        };
        let nearest = |candidates: &[usize]| -> usize {
            *candidates
                .iter()
                .min_by(|&&a, &&b| {
                    euclidean(&points[sel], &points[a])
                        .partial_cmp(&euclidean(&points[sel], &points[b]))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap()
        };
        let constrained: Vec<usize> = available.iter().copied().filter(|&c| length_ok(c)).collect();
        let chosen = if constrained.is_empty() {
            fallback += 1;
            nearest(&available)
        } else {
            nearest(&constrained)
        };
        available.retain(|&c| c != chosen);
        pairs.push((sel, chosen));
    }
    MatchOutcome { pairs, fallback, truncated }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageDiagnostics {
    pub fraction_within_radius: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub max: f64,
}

/// Fraction of points within `radius` of their nearest center, plus
/// nearest-center distance quantiles (nearest-rank convention).
pub fn coverage_diagnostics(
    points: &[Vec<f64>],
    centers: &[usize],
    radius: f64,
) -> CoverageResult<CoverageDiagnostics> {
    if centers.is_empty() {
        return Err(CoverageError::NoPoints);
    }
    let mut dists: Vec<f64> = points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| euclidean(p, &points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let within = dists.iter().filter(|&&d| d <= radius).count();
    let fraction = within as f64 / points.len() as f64;
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let rank = ((p * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
        dists[rank - 1]
    };
    Ok(CoverageDiagnostics {
        fraction_within_radius: fraction,
        q50: q(0.5),
        q90: q(0.9),
        q99: q(0.99),
        max: *dists.last().unwrap(),
    })
}

/// Uniform sample without replacement, seeded.
pub fn random_selection(slice_members: &[usize], n_sel: usize, seed: u64) -> CoverageResult<Vec<usize>> {
    if n_sel > slice_members.len() {
        return Err(CoverageError::SelectionTooLarge { n_sel, n: slice_members.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = slice_members.to_vec();
    members.shuffle(&mut rng);
    members.truncate(n_sel);
    members.sort_unstable();
    Ok(members)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Spectral,
    Random,
}

/// A compact, representative evaluation subset with matched pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePlan {
    pub kind: PlanKind,
    pub seed: u64,
    pub selected_plus: Vec<ExampleId>,
    pub selected_minus: Vec<ExampleId>,
    pub pairs: Vec<(ExampleId, ExampleId)>,
    pub diagnostics: Option<CoverageDiagnostics>,
    pub fallback_matches: usize,
    pub truncated: bool,
}

/// Parameters shared by both plan kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub d_pca: usize,
    pub k_centers: usize,
    pub n_sel: usize,
    pub length_tolerance: f64,
    pub coverage_radius: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        // desk-scale defaults; sized down from the reference settings of
        // d_pca=64, 100 clusters, 50 per group
        PlanConfig {
            d_pca: 8,
            k_centers: 16,
            n_sel: 48,
            length_tolerance: 0.2,
            coverage_radius: 0.5,
        }
    }
}

/// Build a spectral coverage plan over one regime's derived slices.
pub fn build_spectral_plan(
    embedding: &EmbeddingMatrix,
    plus_ids: &[ExampleId],
    minus_ids: &[ExampleId],
    cfg: &PlanConfig,
    seed: u64,
) -> CoverageResult<CoveragePlan> {
    if plus_ids.is_empty() || minus_ids.is_empty() {
        return Err(CoverageError::EmptySlice);
    }
    let d_pca = cfg.d_pca.min(embedding.rows.len() - 1).min(embedding.rows[0].len()).max(1);
    let pca = pca_embed(embedding, d_pca)?;
    let k = cfg.k_centers.min(pca.rows.len());
    let kc = greedy_k_center(&pca.rows, k, KCenterInit::FarthestFromMean)?;

    let plus_idx: Vec<usize> = plus_ids.iter().filter_map(|&id| embedding.index_of(id)).collect();
    let minus_idx: Vec<usize> = minus_ids.iter().filter_map(|&id| embedding.index_of(id)).collect();
    let sel_plus = select_representatives(&plus_idx, &kc.assignment, &pca.rows, cfg.n_sel, mix(seed, 1))?;
    let sel_minus = select_representatives(&minus_idx, &kc.assignment, &pca.rows, cfg.n_sel, mix(seed, 2))?;
    let matches = match_controls(
        &sel_plus,
        &minus_idx,
        &pca.rows,
        embedding.lengths.as_deref(),
        cfg.length_tolerance,
    );
    let diagnostics = coverage_diagnostics(&pca.rows, &kc.centers, cfg.coverage_radius)?;
    Ok(assemble_plan(
        PlanKind::Spectral,
        seed,
        embedding,
        sel_plus,
        sel_minus,
        matches,
        Some(diagnostics),
    ))
}

/// Build a random coverage plan; matched controls are computed the same way
/// as the spectral plan.
pub fn build_random_plan(
    embedding: &EmbeddingMatrix,
    plus_ids: &[ExampleId],
    minus_ids: &[ExampleId],
    cfg: &PlanConfig,
    seed: u64,
) -> CoverageResult<CoveragePlan> {
    if plus_ids.is_empty() || minus_ids.is_empty() {
        return Err(CoverageError::EmptySlice);
    }
    let plus_idx: Vec<usize> = plus_ids.iter().filter_map(|&id| embedding.index_of(id)).collect();
    let minus_idx: Vec<usize> = minus_ids.iter().filter_map(|&id| embedding.index_of(id)).collect();
    let sel_plus = random_selection(&plus_idx, cfg.n_sel.min(plus_idx.len()), mix(seed, 1))?;
    let sel_minus = random_selection(&minus_idx, cfg.n_sel.min(minus_idx.len()), mix(seed, 2))?;
    let d_pca = cfg.d_pca.min(embedding.rows.len() - 1).min(embedding.rows[0].len()).max(1);
    let pca = pca_embed(embedding, d_pca)?;
    let matches = match_controls(
        &sel_plus,
        &minus_idx,
        &pca.rows,
        embedding.lengths.as_deref(),
        cfg.length_tolerance,
    );
    Ok(assemble_plan(
        PlanKind::Random,
        seed,
        embedding,
        sel_plus,
        sel_minus,
        matches,
        None,
    ))
}

fn assemble_plan(
    kind: PlanKind,
    seed: u64,
    embedding: &EmbeddingMatrix,
    sel_plus: Vec<usize>,
    sel_minus: Vec<usize>,
    matches: MatchOutcome,
    diagnostics: Option<CoverageDiagnostics>,
) -> CoveragePlan {
    let mut selected_plus: Vec<ExampleId> = sel_plus.iter().map(|&i| embedding.ids[i]).collect();
    let mut selected_minus: Vec<ExampleId> = sel_minus.iter().map(|&i| embedding.ids[i]).collect();
    selected_plus.sort();
    selected_minus.sort();
    CoveragePlan {
        kind,
        seed,
        selected_plus,
        selected_minus,
        pairs: matches
            .pairs
            .iter()
            .map(|&(a, b)| (embedding.ids[a], embedding.ids[b]))
            .collect(),
        diagnostics,
        fallback_matches: matches.fallback,
        truncated: matches.truncated,
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    crate::oracle::mix_seed(seed, salt)
}

/// Configuration for the synthetic embedding provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { dim: 12, noise: 0.08, seed: 0 }
    }
}

/// Embeddings for one regime of a synthetic task, generated from the task
/// manifest: each planted agonist contributes a latent direction to the
/// examples in its flip set, the slice adds an offset, and Gaussian noise is
/// layered on top. Lengths correlate with slice membership so
/// length-matching is exercised.
pub fn embed_task_regime(
    task: &SyntheticTask,
    regime: BaselineRegime,
    cfg: &EmbedConfig,
) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xe3bd ^ task.spec().seed));
    let dim = cfg.dim;
    let agonists: Vec<_> = task
        .planted()
        .iter()
        .filter(|p| p.regime == regime && p.role == PlantedRole::Agonist)
        .map(|p| p.coord)
        .collect();
    let directions: Vec<Vec<f64>> = agonists
        .iter()
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let len = norm(&v).max(1e-9);
            v.iter_mut().for_each(|x| *x /= len);
            v
        })
        .collect();
    let slice_offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let ids = task.regime_examples(regime);
    let mut rows = Vec::with_capacity(ids.len());
    let mut lengths = Vec::with_capacity(ids.len());
    for &id in &ids {
        let slice = task.planted_slice_of(id).expect("id from task");
        let mut row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) * cfg.noise).collect();
        if slice == SliceTag::Associated {
            for (x, o) in row.iter_mut().zip(&slice_offset) {
                *x += o;
            }
        }
        let mut firing = 0usize;
        for (coord, dir) in agonists.iter().zip(&directions) {
            if task.flips_example(*coord, id).unwrap_or(false) {
                firing += 1;
                for (x, d) in row.iter_mut().zip(dir) {
                    *x += d;
                }
            }
        }
        lengths.push(40.0 + 10.0 * firing as f64 + rng.gen_range(-4.0..4.0));
        rows.push(row);
    }
    EmbeddingMatrix { ids, rows, lengths: Some(lengths) }
}

/// Relative Frobenius reconstruction error of a PCA result against the
/// original matrix.
pub fn pca_reconstruction_error(matrix: &EmbeddingMatrix, pca: &PcaResult) -> f64 {
    let mut err = 0.0;
    let mut total = 0.0;
    for (row, proj) in matrix.rows.iter().zip(&pca.projected) {
        for j in 0..row.len() {
            let recon = pca.mean[j]
                + pca
                    .components
                    .iter()
                    .zip(proj)
                    .map(|(c, p)| c[j] * p)
                    .sum::<f64>();
            err += (row[j] - recon) * (row[j] - recon);
            let centered = row[j] - pca.mean[j];
            total += centered * centered;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (err / total).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn grid_points() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                pts.push(vec![x as f64, y as f64]);
            }
        }
        pts
    }

    fn embedding(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            ids: (0..rows.len() as u32).map(ExampleId).collect(),
            rows,
            lengths: None,
        }
    }

    #[test]
    fn pca_line_with_noise_explains_variance() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 / 10.0;
                vec![t + rng.gen_range(-1e-3..1e-3), 2.0 * t + rng.gen_range(-1e-3..1e-3)]
            })
            .collect();
        let pca = pca_embed(&embedding(rows), 1).unwrap();
        assert!(pca.explained_variance_ratio >= 0.99);
    }

    #[test]
    fn pca_projection_of_mean_is_zero_and_products_preserved() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, -2.0],
        ];
        let m = embedding(rows.clone());
        let pca = pca_embed(&m, 2).unwrap();
        // the mean point, centered and projected, lands on the origin
        let centered_mean: Vec<f64> = pca.mean.iter().map(|m| m - m).collect();
        let mean_proj: Vec<f64> = pca.components.iter().map(|c| dot(&centered_mean, c)).collect();
        assert!(mean_proj.iter().all(|&x| x.abs() < 1e-12));
        // centered data with full dimension keeps pairwise inner products
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let orig = dot(&rows[i], &rows[j]);
                let proj = dot(&pca.projected[i], &pca.projected[j]);
                assert!(close(orig, proj, 1e-9), "{orig} vs {proj}");
            }
        }
    }

    #[test]
    fn pca_reconstruction_at_full_rank() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let m = embedding(rows);
        let pca = pca_embed(&m, 3).unwrap();
        assert!(pca_reconstruction_error(&m, &pca) <= 1e-8);
    }

    #[test]
    fn pca_rank_deficiency_is_warning_not_error() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let pca = pca_embed(&embedding(rows), 2).unwrap();
        assert_eq!(pca.realized_dim, 1);
        assert!(pca.warning.is_some());
    }

    #[test]
    fn k_center_edge_cases() {
        let pts = grid_points();
        let all = greedy_k_center(&pts, pts.len(), KCenterInit::FarthestFromMean).unwrap();
        assert_eq!(all.radius, 0.0);
        let one = greedy_k_center(&pts[..1], 1, KCenterInit::FarthestFromMean).unwrap();
        assert_eq!(one.radius, 0.0);
        assert!(greedy_k_center(&pts, 20, KCenterInit::FarthestFromMean).is_err());
    }

    /// Brute-force optimal k-center radius over all center subsets.
    fn optimal_radius(points: &[Vec<f64>], k: usize) -> f64 {
        fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
            let mut out = Vec::new();
            let mut current = Vec::new();
            fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if current.len() == k {
                    out.push(current.clone());
                    return;
                }
                for i in start..n {
                    current.push(i);
                    rec(i + 1, n, k, current, out);
                    current.pop();
                }
            }
            rec(0, n, k, &mut current, &mut out);
            out
        }
        subsets(points.len(), k)
            .into_iter()
            .map(|centers| {
                points
                    .iter()
                    .map(|p| {
                        centers
                            .iter()
                            .map(|&c| euclidean(p, &points[c]))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn greedy_radius_within_twice_optimal_small() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(4..=12);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let k = rng.gen_range(1..=4.min(n));
            let greedy = greedy_k_center(&pts, k, KCenterInit::FarthestFromMean).unwrap();
            let opt = optimal_radius(&pts, k);
            assert!(greedy.radius <= 2.0 * opt + 1e-9, "{} vs {}", greedy.radius, opt);
        }
    }

    #[test]
    fn representatives_prefer_large_clusters() {
        // 3 clusters of sizes 10 / 5 / 2
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0]);
        }
        for i in 0..5 {
            pts.push(vec![10.0 + 0.01 * i as f64, 0.0]);
        }
        for i in 0..2 {
            pts.push(vec![20.0 + 0.01 * i as f64, 0.0]);
        }
        let kc = greedy_k_center(&pts, 3, KCenterInit::FarthestFromMean).unwrap();
        let members: Vec<usize> = (0..pts.len()).collect();
        let sel = select_representatives(&members, &kc.assignment, &pts, 2, 0).unwrap();
        assert_eq!(sel.len(), 2);
        assert!(sel.iter().any(|&i| i < 10), "size-10 cluster represented");
        assert!(
            sel.iter().any(|&i| (10..15).contains(&i)),
            "size-5 cluster represented"
        );

        // n_sel >= slice size returns the whole slice
        let all = select_representatives(&members, &kc.assignment, &pts, 40, 0).unwrap();
        assert_eq!(all, members);
    }

    #[test]
    fn single_cluster_medoid() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]];
        let kc = greedy_k_center(&pts, 1, KCenterInit::FarthestFromMean).unwrap();
        let sel = select_representatives(&[0, 1, 2], &kc.assignment, &pts, 1, 0).unwrap();
        assert_eq!(sel, vec![1], "middle point is the medoid");
    }

    #[test]
    fn matching_stays_within_cluster_and_is_injective() {
        // two well-separated clusters with associated/unrelated points in each
        let pts = vec![
            vec![0.0, 0.0],   // plus, cluster A
            vec![0.1, 0.0],   // minus, cluster A
            vec![0.2, 0.0],   // minus, cluster A
            vec![10.0, 0.0],  // plus, cluster B
            vec![10.1, 0.0],  // minus, cluster B
        ];
        let m = match_controls(&[0, 3], &[1, 2, 4], &pts, None, 0.2);
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(m.pairs[0], (0, 1));
        assert_eq!(m.pairs[1], (3, 4));
        let partners: std::collections::BTreeSet<usize> =
            m.pairs.iter().map(|&(_, b)| b).collect();
        assert_eq!(partners.len(), m.pairs.len(), "without replacement");
    }

    #[test]
    fn matching_identical_embeddings_distance_zero() {
        let pts = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        let m = match_controls(&[0, 2], &[1, 3], &pts, None, 1.0);
        for &(a, b) in &m.pairs {
            assert_eq!(euclidean(&pts[a], &pts[b]), 0.0);
        }
    }

    #[test]
    fn matching_falls_back_when_lengths_disjoint() {
        let pts = vec![vec![0.0], vec![0.1]];
        let lengths = vec![10.0, 100.0];
        let m = match_controls(&[0], &[1], &pts, Some(&lengths), 0.0);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.fallback, 1);
    }

    #[test]
    fn diagnostics_edge_cases() {
        let pts = grid_points();
        let centers: Vec<usize> = (0..pts.len()).collect();
        let d = coverage_diagnostics(&pts, &centers, 0.1).unwrap();
        assert_eq!(d.fraction_within_radius, 1.0);
        assert_eq!(d.max, 0.0);

        // single distant outlier dominates the max quantile
        let mut pts2 = pts.clone();
        pts2.push(vec![100.0, 100.0]);
        let d = coverage_diagnostics(&pts2, &[0], 5.0).unwrap();
        let expect = euclidean(&pts2[16], &pts2[0]);
        assert!(close(d.max, expect, 1e-12));
    }

    #[test]
    fn diagnostics_fraction_matches_direct_count() {
        let pts = grid_points();
        let kc = greedy_k_center(&pts, 4, KCenterInit::FarthestFromMean).unwrap();
        let r = 1.2;
        let d = coverage_diagnostics(&pts, &kc.centers, r).unwrap();
        let direct = pts
            .iter()
            .filter(|p| {
                kc.centers
                    .iter()
                    .map(|&c| euclidean(p, &pts[c]))
                    .fold(f64::INFINITY, f64::min)
                    <= r
            })
            .count() as f64
            / pts.len() as f64;
        assert!(close(d.fraction_within_radius, direct, 1e-12));
    }

    #[test]
    fn random_selection_behaviour() {
        let members: Vec<usize> = (0..20).collect();
        let all = random_selection(&members, 20, 1).unwrap();
        assert_eq!(all, members);
        let a = random_selection(&members, 5, 7).unwrap();
        let b = random_selection(&members, 5, 7).unwrap();
        assert_eq!(a, b, "seeded selection is reproducible");
        assert!(random_selection(&members, 21, 1).is_err());
    }

    #[test]
    fn random_selection_frequencies_are_uniform() {
        let members: Vec<usize> = (0..16).collect();
        let n_sel = 4;
        let trials = 1000u32;
        let mut counts = vec![0u32; members.len()];
        for seed in 0..trials {
            for i in random_selection(&members, n_sel, seed as u64).unwrap() {
                counts[i] += 1;
            }
        }
        let p = n_sel as f64 / members.len() as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let expect = trials as f64 * p;
        for &c in &counts {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "count {c} outside 3 sigma of {expect}"
            );
        }
    }

    proptest! {
        #[test]
        fn k_center_radius_nonincreasing_in_k(seed in 0u64..200) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..15);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let mut prev = f64::INFINITY;
            for k in 1..=n {
                let r = greedy_k_center(&pts, k, KCenterInit::FarthestFromMean).unwrap().radius;
                prop_assert!(r <= prev + 1e-12);
                prev = r;
            }
        }
    }
}

//! Behavior-oracle abstraction and the synthetic union-of-flips task family.
//!
//! A behavior oracle answers "ablate this coordinate set, what are the
//! post-intervention outcomes on these examples". The synthetic
//! implementation plants per-neuron flip sets per regime and slice; a group
//! flips exactly the union of its members' flip sets, which makes group
//! effects monotone and submodular by construction and cheap enough for
//! exhaustive property checks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitset::BitSet;
use crate::effects::{BaselineRegime, ExampleId, NeuronCoord, SliceTag};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("invalid plant spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible strength target {target}: realizable {realized} differs by more than {tolerance} at {n} examples per slice")]
    InfeasibleStrength { target: f64, realized: f64, tolerance: f64, n: u32 },
    #[error("infeasible overlap: clause requires {needed} fresh examples but only {available} remain outside earlier flip sets")]
    InfeasibleOverlap { needed: usize, available: usize },
    #[error("unknown neuron coordinate {0}")]
    UnknownNeuron(NeuronCoord),
    #[error("unknown example id {0:?}")]
    UnknownExample(ExampleId),
    #[error("example {example:?} belongs to regime {actual}, queried under {queried}")]
    WrongRegime { example: ExampleId, actual: BaselineRegime, queried: BaselineRegime },
    #[error("manifest schema version {0} unsupported")]
    BadManifestVersion(u32),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
}

pub type OracleResult<T> = Result<T, OracleError>;

/// Outcomes of one group evaluation, grouped by the caller's declared slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairOutcomes {
    pub plus: Vec<bool>,
    pub minus: Vec<bool>,
}

/// Black-box ablation oracle.
///
/// One `query_pair` call is one group evaluation regardless of group size or
/// batch size, and increments the query counter by exactly one. Queries are
/// safe to issue concurrently; the counter is the only mutable state.
pub trait BehaviorOracle: Sync {
    /// Per-layer candidate coordinates.
    fn candidate_universe(&self) -> &[Vec<NeuronCoord>];

    /// Evaluate `do(group)` once over a batch carrying the caller's slicing.
    /// Either side may be empty. Querying the empty group returns the
    /// baseline label for every example.
    fn query_pair(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
        plus: &[ExampleId],
        minus: &[ExampleId],
    ) -> OracleResult<PairOutcomes>;

    /// Monotone count of group evaluations issued so far.
    fn query_count(&self) -> u64;

    /// Single-slice form; still one group evaluation.
    fn query(
        &self,
        group: &[NeuronCoord],
        slice: SliceTag,
        regime: BaselineRegime,
        examples: &[ExampleId],
    ) -> OracleResult<Vec<bool>> {
        let out = match slice {
            SliceTag::Associated => self.query_pair(group, regime, examples, &[])?.plus,
            SliceTag::Unrelated => self.query_pair(group, regime, &[], examples)?.minus,
        };
        Ok(out)
    }
}

/// Baseline replacement value family. In the synthetic oracle this is
/// metadata that salts flip-set generation: each mode selects a different
/// pre-generated flip-set family rather than recomputing anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    #[default]
    Zero,
    Mean,
    MeanPositional,
}

impl BaselineMode {
    fn salt(self) -> u64 {
        match self {
            BaselineMode::Zero => 0,
            BaselineMode::Mean => 1,
            BaselineMode::MeanPositional => 2,
        }
    }
}

/// Which regimes receive planted structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlantRegimes {
    #[default]
    Both,
    PositiveOnly,
    NegativeOnly,
}

impl PlantRegimes {
    pub fn includes(self, regime: BaselineRegime) -> bool {
        match self {
            PlantRegimes::Both => true,
            PlantRegimes::PositiveOnly => regime == BaselineRegime::Positive,
            PlantRegimes::NegativeOnly => regime == BaselineRegime::Negative,
        }
    }
}

/// Construction recipe for a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub layer_widths: Vec<u32>,
    /// Examples per (regime, slice) population.
    pub examples_per_slice: u32,
    /// Target singleton strengths of planted agonists, each >= tau.
    pub agonist_strengths: Vec<f64>,
    /// Flip rate of planted agonists on the unrelated slice (0 keeps them
    /// fully selective).
    pub agonist_minus_rate: f64,
    /// Fraction of each later agonist's associated flip set shared with
    /// earlier agonists.
    pub overlap: f64,
    /// Number of catastrophic antagonists (flip every example on both
    /// slices).
    pub antagonists: usize,
    /// Strict upper bound on background singleton strength; must be < tau.
    pub background_cap: f64,
    /// Fraction of non-planted neurons that carry any flips at all.
    pub background_density: f64,
    /// When set, all background flips are confined to a shared example pool
    /// of this measure, so agonist-free groups stay below the pool measure
    /// (a separated oracle when the measure is < tau).
    pub background_pool: Option<f64>,
    pub noise_plus: f64,
    pub noise_minus: f64,
    pub baseline_mode: BaselineMode,
    /// Threshold the caps are validated against.
    pub tau: f64,
    pub seed: u64,
    pub plant_in: PlantRegimes,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            layer_widths: vec![32, 32],
            examples_per_slice: 64,
            agonist_strengths: vec![0.5, 0.4, 0.3],
            agonist_minus_rate: 0.0,
            overlap: 0.25,
            antagonists: 0,
            background_cap: 0.1,
            background_density: 0.25,
            background_pool: Some(0.15),
            noise_plus: 0.0,
            noise_minus: 0.0,
            baseline_mode: BaselineMode::Zero,
            tau: 0.2,
            seed: 0,
            plant_in: PlantRegimes::Both,
        }
    }
}

/// Tolerance on realized vs target planted strength.
pub const STRENGTH_TOLERANCE: f64 = 0.02;

/// Role of a planted neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedRole {
    Agonist,
    Antagonist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub coord: NeuronCoord,
    pub regime: BaselineRegime,
    pub role: PlantedRole,
    pub target_strength: f64,
    pub realized_strength: f64,
    /// Rounding residual `realized - target`.
    pub residual: f64,
}

/// Per-neuron flip sets for one regime: one bitset per slice, over
/// population-local example indices.
#[derive(Debug, Clone, PartialEq, Default)]
struct RegimeFlips {
    plus: BitSet,
    minus: BitSet,
}

/// Deterministic synthetic task with exact per-neuron flip sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    spec: PlantSpec,
    universe: Vec<Vec<NeuronCoord>>,
    layer_offsets: Vec<u32>,
    /// flips[flat_coord][regime_index]
    flips: Vec<[RegimeFlips; 2]>,
    planted: Vec<PlantedNeuron>,
}

pub(crate) fn mix_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over base xor a salted odd constant
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn regime_index(regime: BaselineRegime) -> usize {
    match regime {
        BaselineRegime::Positive => 0,
        BaselineRegime::Negative => 1,
    }
}

fn regime_from_index(i: usize) -> BaselineRegime {
    if i == 0 {
        BaselineRegime::Positive
    } else {
        BaselineRegime::Negative
    }
}

fn slice_index(slice: SliceTag) -> usize {
    match slice {
        SliceTag::Associated => 0,
        SliceTag::Unrelated => 1,
    }
}

/// Sample `count` distinct values from `0..n` in sorted order.
fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..n as u32).collect();
    all.shuffle(rng);
    let mut picked: Vec<u32> = all.into_iter().take(count).collect();
    picked.sort_unstable();
    picked
}

/// Build a synthetic task from a plant spec. Generation is bit-for-bit
/// reproducible from the spec alone.
pub fn plant_task(spec: &PlantSpec) -> OracleResult<SyntheticTask> {
    validate_spec(spec)?;
    let n = spec.examples_per_slice as usize;
    let total: u32 = spec.layer_widths.iter().sum();
    let mut layer_offsets = Vec::with_capacity(spec.layer_widths.len());
    let mut universe = Vec::with_capacity(spec.layer_widths.len());
    let mut offset = 0u32;
    for (layer, &width) in spec.layer_widths.iter().enumerate() {
        layer_offsets.push(offset);
        universe.push(
            (0..width)
                .map(|c| NeuronCoord::new(layer as u16, c))
                .collect(),
        );
        offset += width;
    }

    let mut flips = vec![
        [RegimeFlips::default(), RegimeFlips::default()];
        total as usize
    ];
    for f in &mut flips {
        for r in f.iter_mut() {
            r.plus = BitSet::new(n);
            r.minus = BitSet::new(n);
        }
    }
    let mut planted = Vec::new();

    for regime in BaselineRegime::both() {
        if !spec.plant_in.includes(regime) {
            continue;
        }
        let ri = regime_index(regime);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            spec.seed,
            0x7a51 ^ ((ri as u64) << 8) ^ spec.baseline_mode.salt(),
        ));

        let k = spec.agonist_strengths.len();
        let special = sample_distinct(&mut rng, total as usize, k + spec.antagonists);
        let agonist_coords = &special[..k];
        let antagonist_coords = &special[k..];

        // associated-slice flip sets; each agonist shares the configured
        // fraction of its set with its predecessor in the chain
        let mut previous = BitSet::new(n);
        for (i, (&flat, &target)) in agonist_coords.iter().zip(&spec.agonist_strengths).enumerate()
        {
            let size = (target * n as f64).round() as usize;
            let realized = size as f64 / n as f64;
            if (realized - target).abs() > STRENGTH_TOLERANCE {
                return Err(OracleError::InfeasibleStrength {
                    target,
                    realized,
                    tolerance: STRENGTH_TOLERANCE,
                    n: spec.examples_per_slice,
                });
            }
            let shared_want = if i == 0 {
                0
            } else {
                (spec.overlap * size as f64).round() as usize
            };
            let prior: Vec<u32> = previous.iter_ones().map(|x| x as u32).collect();
            let shared_take = shared_want.min(prior.len());
            let fresh_need = size - shared_take;
            let fresh_pool: Vec<u32> = (0..n as u32)
                .filter(|&x| !previous.contains(x as usize))
                .collect();
            if fresh_need > fresh_pool.len() {
                return Err(OracleError::InfeasibleOverlap {
                    needed: fresh_need,
                    available: fresh_pool.len(),
                });
            }
            let mut members: Vec<u32> = prior
                .choose_multiple(&mut rng, shared_take)
                .copied()
                .collect();
            members.extend(fresh_pool.choose_multiple(&mut rng, fresh_need).copied());
            let set = BitSet::from_indices(n, &members);
            previous = set.clone();
            flips[flat as usize][ri].plus = set;

            let minus_size = (spec.agonist_minus_rate * n as f64).round() as usize;
            if minus_size > 0 {
                let picks = sample_distinct(&mut rng, n, minus_size);
                flips[flat as usize][ri].minus = BitSet::from_indices(n, &picks);
            }
            let realized_strength = (flips[flat as usize][ri].plus.count_ones() as f64
                / n as f64)
                .max(flips[flat as usize][ri].minus.count_ones() as f64 / n as f64);
            planted.push(PlantedNeuron {
                coord: coord_of(flat, &layer_offsets, &spec.layer_widths),
                regime,
                role: PlantedRole::Agonist,
                target_strength: target,
                realized_strength,
                residual: realized_strength - target,
            });
        }

        for &flat in antagonist_coords {
            flips[flat as usize][ri].plus = BitSet::full(n);
            flips[flat as usize][ri].minus = BitSet::full(n);
            planted.push(PlantedNeuron {
                coord: coord_of(flat, &layer_offsets, &spec.layer_widths),
                regime,
                role: PlantedRole::Antagonist,
                target_strength: 1.0,
                realized_strength: 1.0,
                residual: 0.0,
            });
        }

        // background neurons, optionally confined to a shared pool
        let pool: Option<[Vec<u32>; 2]> = spec.background_pool.map(|measure| {
            let size = ((measure * n as f64).round() as usize).min(n);
            [
                sample_distinct(&mut rng, n, size),
                sample_distinct(&mut rng, n, size),
            ]
        });
        let rest: Vec<u32> = (0..total).filter(|f| !special.contains(f)).collect();
        let bg_count = (spec.background_density * rest.len() as f64).round() as usize;
        let chosen: Vec<u32> = {
            let mut r = rest.clone();
            r.shuffle(&mut rng);
            let mut c: Vec<u32> = r.into_iter().take(bg_count).collect();
            c.sort_unstable();
            c
        };
        for flat in chosen {
            for si in 0..2 {
                let rate: f64 = rng.gen_range(0.0..spec.background_cap);
                let size = (rate * n as f64).floor() as usize;
                if size == 0 {
                    continue;
                }
                let members: Vec<u32> = match &pool {
                    Some(pools) => pools[si]
                        .choose_multiple(&mut rng, size.min(pools[si].len()))
                        .copied()
                        .collect(),
                    None => sample_distinct(&mut rng, n, size),
                };
                let set = BitSet::from_indices(n, &members);
                debug_assert!((set.count_ones() as f64 / n as f64) < spec.tau);
                if si == 0 {
                    flips[flat as usize][ri].plus = set;
                } else {
                    flips[flat as usize][ri].minus = set;
                }
            }
        }
    }

    Ok(SyntheticTask {
        spec: spec.clone(),
        universe,
        layer_offsets,
        flips,
        planted,
    })
}

fn validate_spec(spec: &PlantSpec) -> OracleResult<()> {
    let fail = |msg: String| Err(OracleError::InvalidSpec(msg));
    if spec.layer_widths.is_empty() || spec.layer_widths.iter().any(|&w| w == 0) {
        return fail("layer widths must be nonempty and positive".into());
    }
    if spec.examples_per_slice == 0 {
        return fail("examples_per_slice must be positive".into());
    }
    if !(0.0..1.0).contains(&spec.background_cap) || spec.background_cap >= spec.tau {
        return fail(format!(
            "background_cap {} must lie in [0, tau={})",
            spec.background_cap, spec.tau
        ));
    }
    if !(0.0..=1.0).contains(&spec.overlap) {
        return fail(format!("overlap {} outside [0, 1]", spec.overlap));
    }
    for &s in &spec.agonist_strengths {
        if !(0.0..=1.0).contains(&s) || s < spec.tau {
            return fail(format!("agonist strength {s} must lie in [tau={}, 1]", spec.tau));
        }
    }
    let total: u32 = spec.layer_widths.iter().sum();
    if spec.agonist_strengths.len() + spec.antagonists > total as usize {
        return fail("more planted neurons than candidates".into());
    }
    Ok(())
}

fn coord_of(flat: u32, offsets: &[u32], widths: &[u32]) -> NeuronCoord {
    for (layer, (&off, &width)) in offsets.iter().zip(widths).enumerate() {
        if flat < off + width {
            return NeuronCoord::new(layer as u16, flat - off);
        }
    }
    unreachable!("flat index {flat} out of range");
}

impl SyntheticTask {
    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    pub fn universe(&self) -> &[Vec<NeuronCoord>] {
        &self.universe
    }

    pub fn total_candidates(&self) -> usize {
        self.flips.len()
    }

    pub fn examples_per_slice(&self) -> u32 {
        self.spec.examples_per_slice
    }

    fn flat_index(&self, coord: NeuronCoord) -> OracleResult<usize> {
        let layer = coord.layer as usize;
        if layer >= self.layer_offsets.len()
            || coord.channel >= self.spec.layer_widths[layer]
        {
            return Err(OracleError::UnknownNeuron(coord));
        }
        Ok((self.layer_offsets[layer] + coord.channel) as usize)
    }

    /// Global ids are laid out population by population:
    /// (positive, +), (positive, -), (negative, +), (negative, -).
    fn population_start(&self, regime: BaselineRegime, slice: SliceTag) -> u32 {
        let n = self.spec.examples_per_slice;
        (regime_index(regime) as u32 * 2 + slice_index(slice) as u32) * n
    }

    pub fn examples(&self, regime: BaselineRegime, slice: SliceTag) -> Vec<ExampleId> {
        let start = self.population_start(regime, slice);
        (start..start + self.spec.examples_per_slice)
            .map(ExampleId)
            .collect()
    }

    /// All examples whose baseline label matches the regime.
    pub fn regime_examples(&self, regime: BaselineRegime) -> Vec<ExampleId> {
        let mut v = self.examples(regime, SliceTag::Associated);
        v.extend(self.examples(regime, SliceTag::Unrelated));
        v
    }

    pub fn locate(&self, id: ExampleId) -> OracleResult<(BaselineRegime, SliceTag, usize)> {
        let n = self.spec.examples_per_slice;
        let pop = id.0 / n;
        if pop >= 4 {
            return Err(OracleError::UnknownExample(id));
        }
        let regime = regime_from_index((pop / 2) as usize);
        let slice = if pop % 2 == 0 {
            SliceTag::Associated
        } else {
            SliceTag::Unrelated
        };
        Ok((regime, slice, (id.0 % n) as usize))
    }

    pub fn regime_of(&self, id: ExampleId) -> OracleResult<BaselineRegime> {
        Ok(self.locate(id)?.0)
    }

    pub fn planted_slice_of(&self, id: ExampleId) -> OracleResult<SliceTag> {
        Ok(self.locate(id)?.1)
    }

    pub fn planted(&self) -> &[PlantedNeuron] {
        &self.planted
    }

    pub fn planted_agonists(&self, regime: BaselineRegime) -> Vec<&PlantedNeuron> {
        self.planted
            .iter()
            .filter(|p| p.regime == regime && p.role == PlantedRole::Agonist)
            .collect()
    }

    pub fn planted_antagonists(&self, regime: BaselineRegime) -> Vec<&PlantedNeuron> {
        self.planted
            .iter()
            .filter(|p| p.regime == regime && p.role == PlantedRole::Antagonist)
            .collect()
    }

    fn flip_sets(&self, coord: NeuronCoord, regime: BaselineRegime) -> OracleResult<&RegimeFlips> {
        let flat = self.flat_index(coord)?;
        Ok(&self.flips[flat][regime_index(regime)])
    }

    /// Whether ablating `coord` flips example `id` (exact, pre-noise).
    pub fn flips_example(&self, coord: NeuronCoord, id: ExampleId) -> OracleResult<bool> {
        let (regime, slice, local) = self.locate(id)?;
        let sets = self.flip_sets(coord, regime)?;
        Ok(match slice {
            SliceTag::Associated => sets.plus.contains(local),
            SliceTag::Unrelated => sets.minus.contains(local),
        })
    }

    /// Exact singleton flip rate on one (regime, slice).
    pub fn exact_singleton_rate(
        &self,
        coord: NeuronCoord,
        regime: BaselineRegime,
        slice: SliceTag,
    ) -> OracleResult<f64> {
        let sets = self.flip_sets(coord, regime)?;
        let count = match slice {
            SliceTag::Associated => sets.plus.count_ones(),
            SliceTag::Unrelated => sets.minus.count_ones(),
        };
        Ok(count as f64 / self.spec.examples_per_slice as f64)
    }

    /// Exact group flip rate: the measure of the union of member flip sets.
    pub fn exact_group_rate(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
        slice: SliceTag,
    ) -> OracleResult<f64> {
        let union = self.group_union(group, regime, slice)?;
        Ok(union.count_ones() as f64 / self.spec.examples_per_slice as f64)
    }

    /// Exact strength of a group: max of the two slice rates.
    pub fn exact_group_strength(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
    ) -> OracleResult<f64> {
        let p = self.exact_group_rate(group, regime, SliceTag::Associated)?;
        let m = self.exact_group_rate(group, regime, SliceTag::Unrelated)?;
        Ok(p.max(m))
    }

    fn group_union(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
        slice: SliceTag,
    ) -> OracleResult<BitSet> {
        let mut union = BitSet::new(self.spec.examples_per_slice as usize);
        for &coord in group {
            let sets = self.flip_sets(coord, regime)?;
            union.union_with(match slice {
                SliceTag::Associated => &sets.plus,
                SliceTag::Unrelated => &sets.minus,
            });
        }
        Ok(union)
    }

    /// Number of the given examples flipped by the union of `group`
    /// (exact, pre-noise).
    pub fn exact_union_flip_count(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
        examples: &[ExampleId],
    ) -> OracleResult<usize> {
        let unions = [
            self.group_union(group, regime, SliceTag::Associated)?,
            self.group_union(group, regime, SliceTag::Unrelated)?,
        ];
        let mut count = 0;
        for &id in examples {
            let (r, slice, local) = self.locate(id)?;
            if r != regime {
                return Err(OracleError::WrongRegime { example: id, actual: r, queried: regime });
            }
            if unions[slice_index(slice)].contains(local) {
                count += 1;
            }
        }
        Ok(count)
    }

    /// All coordinates whose exact singleton strength reaches `tau` in the
    /// given regime, with their exact strengths.
    pub fn ground_truth_agonists(
        &self,
        tau: f64,
        regime: BaselineRegime,
    ) -> Vec<(NeuronCoord, f64)> {
        let n = self.spec.examples_per_slice as f64;
        let ri = regime_index(regime);
        let mut found = Vec::new();
        for (flat, sets) in self.flips.iter().enumerate() {
            let strength = (sets[ri].plus.count_ones() as f64 / n)
                .max(sets[ri].minus.count_ones() as f64 / n);
            if strength >= tau {
                found.push((
                    coord_of(flat as u32, &self.layer_offsets, &self.spec.layer_widths),
                    strength,
                ));
            }
        }
        found
    }

    pub fn to_manifest(&self) -> TaskManifest {
        let mut entries = Vec::new();
        for (flat, per_regime) in self.flips.iter().enumerate() {
            for (ri, sets) in per_regime.iter().enumerate() {
                if sets.plus.is_empty() && sets.minus.is_empty() {
                    continue;
                }
                entries.push(FlipEntry {
                    coord: coord_of(flat as u32, &self.layer_offsets, &self.spec.layer_widths),
                    regime: regime_from_index(ri),
                    plus_runs: sets.plus.to_runs(),
                    minus_runs: sets.minus.to_runs(),
                });
            }
        }
        TaskManifest {
            schema_version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            planted: self.planted.clone(),
            flips: entries,
        }
    }

    pub fn from_manifest(manifest: &TaskManifest) -> OracleResult<SyntheticTask> {
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(OracleError::BadManifestVersion(manifest.schema_version));
        }
        validate_spec(&manifest.spec)?;
        let spec = &manifest.spec;
        let n = spec.examples_per_slice as usize;
        let total: u32 = spec.layer_widths.iter().sum();
        let mut layer_offsets = Vec::new();
        let mut universe = Vec::new();
        let mut offset = 0u32;
        for (layer, &width) in spec.layer_widths.iter().enumerate() {
            layer_offsets.push(offset);
            universe.push((0..width).map(|c| NeuronCoord::new(layer as u16, c)).collect());
            offset += width;
        }
        let mut flips = vec![[RegimeFlips::default(), RegimeFlips::default()]; total as usize];
        for f in &mut flips {
            for r in f.iter_mut() {
                r.plus = BitSet::new(n);
                r.minus = BitSet::new(n);
            }
        }
        let task_shell = SyntheticTask {
            spec: spec.clone(),
            universe: universe.clone(),
            layer_offsets: layer_offsets.clone(),
            flips: Vec::new(),
            planted: Vec::new(),
        };
        for entry in &manifest.flips {
            let flat = task_shell
                .flat_index(entry.coord)
                .map_err(|_| OracleError::BadManifest(format!("coord {} out of range", entry.coord)))?;
            let ri = regime_index(entry.regime);
            flips[flat][ri].plus = BitSet::from_runs(n, &entry.plus_runs);
            flips[flat][ri].minus = BitSet::from_runs(n, &entry.minus_runs);
        }
        Ok(SyntheticTask {
            spec: spec.clone(),
            universe,
            layer_offsets,
            flips,
            planted: manifest.planted.clone(),
        })
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// Versioned task manifest: spec echo, planted truth, and per-neuron flip
/// sets as run-length-encoded bitsets. Round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub schema_version: u32,
    pub spec: PlantSpec,
    pub planted: Vec<PlantedNeuron>,
    pub flips: Vec<FlipEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipEntry {
    pub coord: NeuronCoord,
    pub regime: BaselineRegime,
    pub plus_runs: Vec<u32>,
    pub minus_runs: Vec<u32>,
}

impl TaskManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> OracleResult<TaskManifest> {
        serde_json::from_str(s).map_err(|e| OracleError::BadManifest(e.to_string()))
    }
}

/// Deterministic oracle over a synthetic task. Outcome noise draws come from
/// a single seeded stream; with zero noise the stream is never consumed, so
/// results are identical across group-evaluation orderings.
pub struct SyntheticOracle {
    task: SyntheticTask,
    queries: AtomicU64,
    noise_rng: Mutex<ChaCha8Rng>,
}

impl SyntheticOracle {
    pub fn new(task: SyntheticTask) -> Self {
        let seed = mix_seed(task.spec.seed, 0x6e01);
        SyntheticOracle {
            task,
            queries: AtomicU64::new(0),
            noise_rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    fn evaluate(
        &self,
        unions: &[BitSet; 2],
        regime: BaselineRegime,
        examples: &[ExampleId],
    ) -> OracleResult<Vec<bool>> {
        let b = regime.label();
        let spec = self.task.spec();
        let noisy = spec.noise_plus > 0.0 || spec.noise_minus > 0.0;
        let mut out = Vec::with_capacity(examples.len());
        for &id in examples {
            let (r, slice, local) = self.task.locate(id)?;
            if r != regime {
                return Err(OracleError::WrongRegime { example: id, actual: r, queried: regime });
            }
            let flipped = unions[slice_index(slice)].contains(local);
            let mut outcome = b != flipped; // outcome == b unless flipped
            if noisy {
                let rate = match slice {
                    SliceTag::Associated => spec.noise_plus,
                    SliceTag::Unrelated => spec.noise_minus,
                };
                if rate > 0.0 && self.noise_rng.lock().unwrap().gen_bool(rate) {
                    outcome = !outcome;
                }
            }
            out.push(outcome);
        }
        Ok(out)
    }
}

impl BehaviorOracle for SyntheticOracle {
    fn candidate_universe(&self) -> &[Vec<NeuronCoord>] {
        self.task.universe()
    }

    fn query_pair(
        &self,
        group: &[NeuronCoord],
        regime: BaselineRegime,
        plus: &[ExampleId],
        minus: &[ExampleId],
    ) -> OracleResult<PairOutcomes> {
        // one group evaluation covers the whole batch
        self.queries.fetch_add(1, Ordering::Relaxed);
        let unions = [
            self.task.group_union(group, regime, SliceTag::Associated)?,
            self.task.group_union(group, regime, SliceTag::Unrelated)?,
        ];
        Ok(PairOutcomes {
            plus: self.evaluate(&unions, regime, plus)?,
            minus: self.evaluate(&unions, regime, minus)?,
        })
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

//! Domain types and pure effect metrics shared by every other module.
//!
//! All types are immutable after construction and all operations are pure,
//! so everything here is safe to share across threads without coordination.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::stats;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EffectsError {
    #[error("empty outcome sequence")]
    EmptyOutcomes,
    #[error("dominance ratio undefined for zero group strength")]
    UndefinedDominance,
    #[error("subset of size {size} outside 1..={m}")]
    SubsetSizeOutOfRange { size: usize, m: usize },
    #[error("invalid neuron coordinate string {0:?}, expected m<layer>:<channel>")]
    BadCoordString(String),
    #[error("flip counts exceed sample counts")]
    BadCounts,
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

pub type EffectsResult<T> = Result<T, EffectsError>;

/// One ablatable scalar coordinate: a (layer, channel) pair.
///
/// Ordering is lexicographic on (layer, channel). The textual form is
/// `m<layer>:<channel>`, e.g. `m4:3206`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronCoord {
    pub layer: u16,
    pub channel: u32,
}

impl NeuronCoord {
    pub fn new(layer: u16, channel: u32) -> Self {
        NeuronCoord { layer, channel }
    }
}

impl fmt::Display for NeuronCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}:{}", self.layer, self.channel)
    }
}

impl FromStr for NeuronCoord {
    type Err = EffectsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EffectsError::BadCoordString(s.to_string());
        let rest = s.strip_prefix('m').ok_or_else(bad)?;
        let (layer, channel) = rest.split_once(':').ok_or_else(bad)?;
        Ok(NeuronCoord {
            layer: layer.parse().map_err(|_| bad())?,
            channel: channel.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for NeuronCoord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NeuronCoord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Baseline regime: the constant un-intervened outcome on the evaluation
/// subset. `Positive` (b=1) measures the 1->0 flip direction, `Negative`
/// (b=0) measures 0->1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineRegime {
    Positive,
    Negative,
}

impl BaselineRegime {
    /// The baseline label b.
    pub fn label(self) -> bool {
        matches!(self, BaselineRegime::Positive)
    }

    pub fn both() -> [BaselineRegime; 2] {
        [BaselineRegime::Positive, BaselineRegime::Negative]
    }
}

impl fmt::Display for BaselineRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineRegime::Positive => write!(f, "positive"),
            BaselineRegime::Negative => write!(f, "negative"),
        }
    }
}

impl FromStr for BaselineRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" | "b1" | "1" => Ok(BaselineRegime::Positive),
            "negative" | "b0" | "0" => Ok(BaselineRegime::Negative),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

/// Slice tag within a regime: rule-associated (+) or unrelated (-).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceTag {
    Associated,
    Unrelated,
}

impl fmt::Display for SliceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceTag::Associated => write!(f, "+"),
            SliceTag::Unrelated => write!(f, "-"),
        }
    }
}

/// Opaque evaluation-example identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ExampleId(pub u32);

/// Estimated slice flip rates with sample counts and one-sided upper
/// confidence bounds. Counts are kept alongside the rates so bounds stay
/// recomputable at any level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub n_plus: u64,
    pub n_minus: u64,
    pub ucb_plus: f64,
    pub ucb_minus: f64,
}

impl GroupEffect {
    /// Build from flip counts, with upper bounds at level `alpha / 2` per
    /// slice (so the combined strength bound holds at level `alpha`).
    pub fn from_counts(
        flips_plus: u64,
        n_plus: u64,
        flips_minus: u64,
        n_minus: u64,
        alpha: f64,
    ) -> EffectsResult<Self> {
        if flips_plus > n_plus || flips_minus > n_minus {
            return Err(EffectsError::BadCounts);
        }
        Ok(GroupEffect {
            delta_plus: flips_plus as f64 / n_plus as f64,
            delta_minus: flips_minus as f64 / n_minus as f64,
            n_plus,
            n_minus,
            ucb_plus: stats::cp_upper(flips_plus, n_plus, alpha / 2.0)?,
            ucb_minus: stats::cp_upper(flips_minus, n_minus, alpha / 2.0)?,
        })
    }

    /// Construct from raw fields (used by deserialization paths and tests).
    pub fn raw(
        delta_plus: f64,
        delta_minus: f64,
        n_plus: u64,
        n_minus: u64,
        ucb_plus: f64,
        ucb_minus: f64,
    ) -> Self {
        GroupEffect { delta_plus, delta_minus, n_plus, n_minus, ucb_plus, ucb_minus }
    }

    pub fn flips_plus(&self) -> u64 {
        (self.delta_plus * self.n_plus as f64).round() as u64
    }

    pub fn flips_minus(&self) -> u64 {
        (self.delta_minus * self.n_minus as f64).round() as u64
    }

    /// Regime-conditional strength: the larger of the two slice flip rates.
    pub fn strength(&self) -> f64 {
        self.delta_plus.max(self.delta_minus)
    }

    /// Absolute selectivity: |delta+ - delta-|.
    pub fn selectivity_abs(&self) -> f64 {
        (self.delta_plus - self.delta_minus).abs()
    }

    /// Signed selectivity: delta+ - delta-.
    pub fn selectivity_signed(&self) -> f64 {
        self.delta_plus - self.delta_minus
    }

    /// max(ucb+, ucb-): upper bound on strength.
    pub fn ucb_strength(&self) -> f64 {
        self.ucb_plus.max(self.ucb_minus)
    }
}

/// (strength, |selectivity|, signed selectivity) of an effect estimate.
pub fn strength_and_selectivity(effect: &GroupEffect) -> (f64, f64, f64) {
    (
        effect.strength(),
        effect.selectivity_abs(),
        effect.selectivity_signed(),
    )
}

/// An accepted singleton with its measured effect and classification flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgonistRecord {
    pub neuron: NeuronCoord,
    pub regime: BaselineRegime,
    pub effect: GroupEffect,
    pub catastrophic: bool,
    pub selective: bool,
}

impl AgonistRecord {
    /// Classify selectivity at construction from the configured epsilon.
    /// Neither flag ever causes a record to be discarded.
    pub fn new(
        neuron: NeuronCoord,
        regime: BaselineRegime,
        effect: GroupEffect,
        epsilon: f64,
    ) -> Self {
        AgonistRecord {
            neuron,
            regime,
            effect,
            catastrophic: false,
            selective: effect.selectivity_abs() >= epsilon,
        }
    }

    /// Mark the record catastrophic. Only meaningful for strong,
    /// non-selective neurons.
    pub fn mark_catastrophic(&mut self, tau: f64) {
        debug_assert!(self.effect.strength() >= tau && !self.selective);
        self.catastrophic = true;
    }
}

/// Fraction of outcomes that differ from the regime's baseline label.
///
/// Under b=1 this equals 1 - slice accuracy; under b=0 it equals slice
/// accuracy.
pub fn flip_rate(outcomes: &[bool], regime: BaselineRegime) -> EffectsResult<f64> {
    if outcomes.is_empty() {
        return Err(EffectsError::EmptyOutcomes);
    }
    let b = regime.label();
    let flips = outcomes.iter().filter(|&&o| o != b).count();
    Ok(flips as f64 / outcomes.len() as f64)
}

/// A measured sub-group strength, used as input to the dominance ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEffect {
    pub members: Vec<NeuronCoord>,
    pub strength: f64,
}

/// m-way dominance ratio: the largest subset-to-group strength ratio over
/// the provided subsets of size at most `m`. A group is (m, rho)-overtopped
/// iff the ratio is at least rho.
pub fn dominance_ratio(
    group_strength: f64,
    subsets: &[SubsetEffect],
    m: usize,
) -> EffectsResult<f64> {
    if group_strength <= 0.0 {
        return Err(EffectsError::UndefinedDominance);
    }
    let mut best: f64 = 0.0;
    for subset in subsets {
        let size = subset.members.len();
        if size == 0 || size > m {
            return Err(EffectsError::SubsetSizeOutOfRange { size, m });
        }
        best = best.max(subset.strength / group_strength);
    }
    Ok(best)
}

/// Jaccard index `|A n B| / |A u B|`. Two empty sets yield 0 so overlap
/// reports never contain NaN.
pub fn jaccard(a: &BTreeSet<NeuronCoord>, b: &BTreeSet<NeuronCoord>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / union as f64
}

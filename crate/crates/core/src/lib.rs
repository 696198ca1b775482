//! Rule-grounded neuron localization over black-box behavior oracles.
//!
//! Given an oracle that reports per-example flip outcomes under group
//! ablations, this crate localizes sparse high-effect coordinates with a
//! confidence-pruned binary hierarchical search, extracts MCC-scored
//! symbolic splitter and anchored rules over boolean predicate matrices,
//! and reproduces the search / recall / coverage experiment families at
//! desk scale against synthetic planted-truth oracles.

pub mod baseline;
pub mod bitset;
pub mod candidates;
pub mod coverage;
pub mod effects;
pub mod harness;
pub mod localizer;
pub mod oracle;
pub mod rules;
pub mod stats;

pub use effects::{
    dominance_ratio, flip_rate, jaccard, strength_and_selectivity, AgonistRecord, BaselineRegime,
    ExampleId, GroupEffect, NeuronCoord, SliceTag, SubsetEffect,
};
pub use oracle::{BehaviorOracle, PlantSpec, SyntheticOracle, SyntheticTask, TaskManifest};

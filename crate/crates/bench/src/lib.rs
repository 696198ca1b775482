//! Shared fixtures for the criterion benches.

use agonist_core::localizer::{EvalSubset, SearchConfig};
use agonist_core::oracle::{plant_task, PlantRegimes, PlantSpec, SyntheticOracle};
use agonist_core::{BaselineRegime, SliceTag};

/// A separated positive-regime task sized like the search benchmarks expect.
pub fn bench_task(width: u32, k: usize) -> SyntheticOracle {
    let spec = PlantSpec {
        layer_widths: vec![width],
        agonist_strengths: vec![0.5; k],
        overlap: 0.0,
        background_density: 0.0,
        plant_in: PlantRegimes::PositiveOnly,
        seed: 42,
        ..PlantSpec::default()
    };
    SyntheticOracle::new(plant_task(&spec).expect("bench spec plants"))
}

pub fn full_subset(oracle: &SyntheticOracle) -> EvalSubset {
    EvalSubset {
        plus: oracle
            .task()
            .examples(BaselineRegime::Positive, SliceTag::Associated),
        minus: oracle
            .task()
            .examples(BaselineRegime::Positive, SliceTag::Unrelated),
    }
}

pub fn bench_config() -> SearchConfig {
    SearchConfig::default()
}

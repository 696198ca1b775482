//! Run configuration: one schema-versioned structured file drives every
//! stage, and all randomness fans out from a single master seed by labeled
//! derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coverage::PlanConfig;
use crate::localizer::SearchConfig;
use crate::oracle::PlantSpec;
use crate::rules::EnumerationConfig;
use crate::stats::FilterThresholds;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the output root; `out_dir` is resolved
/// against it when set. This is the only environment input.
pub const OUT_ROOT_ENV: &str = "AGONIST_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config schema version {0} unsupported (expected {CONFIG_SCHEMA_VERSION})")]
    BadSchemaVersion(u32),
    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadSplitFractions((f64, f64, f64)),
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub features: bool,
    pub coverage: bool,
    pub reduce: bool,
    pub localize: bool,
    pub anchor: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { features: true, coverage: true, reduce: true, localize: true, anchor: true }
    }
}

/// Predicate-matrix synthesis knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixSettings {
    /// Include one boolean trigger column per planted agonist whose fired
    /// set equals the agonist's flip set.
    pub plantable: bool,
    pub noise_columns: usize,
    pub signal_noise: f64,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        MatrixSettings { plantable: true, noise_columns: 3, signal_noise: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulesSettings {
    pub enumeration: EnumerationConfig,
    pub seed_k: usize,
    pub hq_threshold: f64,
    /// Number of splitters extracted per run (ties broken toward fewer
    /// clauses).
    pub k_splitters: usize,
    pub split_fractions: (f64, f64, f64),
    pub stratify_clusters: usize,
}

impl Default for RulesSettings {
    fn default() -> Self {
        RulesSettings {
            enumeration: EnumerationConfig::default(),
            seed_k: 12,
            hq_threshold: 0.85,
            k_splitters: 1,
            // proportions are config-visible defaults, not reference values
            split_fractions: (0.6, 0.2, 0.2),
            stratify_clusters: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageSettings {
    pub plan: PlanConfig,
    pub embed_dim: usize,
    pub embed_noise: f64,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        CoverageSettings { plan: PlanConfig::default(), embed_dim: 12, embed_noise: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// Controlled-recall reducer over planted truth with a leak knob.
    GroundTruth { leak_rate: f64 },
    /// Integrated-gradients scorer over synthetic activation pairs.
    IgSurrogate { pairs: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateSettings {
    pub scorer: ScorerKind,
    pub budget: usize,
}

impl Default for CandidateSettings {
    fn default() -> Self {
        CandidateSettings { scorer: ScorerKind::GroundTruth { leak_rate: 0.0 }, budget: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSettings {
    /// High-quality threshold sweep for the condition comparison.
    pub thresholds: Vec<f64>,
    pub e1_seeds: u32,
    pub e3_seeds: u32,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            thresholds: vec![0.80, 0.85, 0.90, 0.95, 0.99],
            e1_seeds: 5,
            e3_seeds: 3,
        }
    }
}

/// Full run configuration. A run is reproducible from this plus the master
/// seed alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub task: PlantSpec,
    pub stages: StageToggles,
    pub search: SearchConfig,
    pub features: FilterThresholds,
    pub matrix: MatrixSettings,
    pub rules: RulesSettings,
    pub coverage: CoverageSettings,
    pub candidates: CandidateSettings,
    pub report: ReportSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task: PlantSpec {
                layer_widths: vec![32, 32],
                agonist_strengths: vec![0.6, 0.5, 0.45, 0.35, 0.3, 0.25],
                ..PlantSpec::default()
            },
            stages: StageToggles::default(),
            search: SearchConfig::default(),
            features: FilterThresholds::default(),
            matrix: MatrixSettings::default(),
            rules: RulesSettings::default(),
            coverage: CoverageSettings::default(),
            candidates: CandidateSettings::default(),
            report: ReportSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::BadSchemaVersion(self.schema_version));
        }
        let (a, b, c) = self.rules.split_fractions;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(ConfigError::BadSplitFractions(self.rules.split_fractions));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory, resolved against the env-provided root when set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    /// Task spec with the plant seed derived from the master seed.
    pub fn seeded_task(&self, salt: &str) -> PlantSpec {
        PlantSpec { seed: derive_seed(self.master_seed, salt), ..self.task.clone() }
    }

    /// Search config with its seed derived from the master seed.
    pub fn seeded_search(&self, salt: &str) -> SearchConfig {
        SearchConfig { seed: derive_seed(self.master_seed, salt), ..self.search }
    }
}

/// Labeled subseed derivation: FNV-1a over the label, mixed with the master
/// seed. Stable across runs and platforms.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    crate::oracle::mix_seed(master, h)
}

//! Application config: one TOML file covering every module, with command-line
//! flags applied on top.

use std::path::{Path, PathBuf};

use aqp_core::cvae::CvaeConfig;
use aqp_core::engine::{EngineConfig, TrainOptions};
use aqp_core::evalharness::{EvalConfig, WorkloadSpec};
use aqp_core::masking::{MaskKind, MaskPolicy, DEFAULT_MASK_FACTOR};
use aqp_core::rng::derive_seed;
use aqp_core::selectivity::ArConfig;
use aqp_core::sqlfront::Aggregate;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file with a header row.
    pub table: Option<PathBuf>,
    /// Schema override (TOML); inferred from the CSV when absent.
    pub schema: Option<PathBuf>,
    /// Data rows sampled for schema inference.
    pub infer_rows: usize,
    /// Fraction of rows held out of training; eval then measures against
    /// the held-out rows only.
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub kind: MaskKind,
    pub factor: f64,
    pub seed: Option<u64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { kind: MaskKind::Stratified, factor: DEFAULT_MASK_FACTOR, seed: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Numerical columns materialized as equal-frequency bin columns.
    pub discretize: Vec<String>,
    /// Bins per discretized column (0 selects the default of 8).
    pub bins: usize,
    /// Generated rows used for the marginal fidelity check after training.
    pub fidelity_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub count: usize,
    pub aggregates: Vec<Aggregate>,
    pub group_by: bool,
    pub log_selectivity: bool,
    /// Sample counts for `eval --samples-sweep`.
    pub samples: Vec<usize>,
    /// Policies compared by `eval --masking-ablation`.
    pub ablation: Vec<MaskKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        EvalSection {
            count: w.count,
            aggregates: w.aggregates,
            group_by: w.group_by,
            log_selectivity: w.log_selectivity,
            samples: vec![100, 500, 1000, 2000],
            ablation: vec![MaskKind::Stratified, MaskKind::Random, MaskKind::None],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Root seed. Unset module seeds are derived from it.
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub cvae: CvaeConfig,
    pub selest: ArConfig,
    pub engine: EngineConfig,
    pub eval: EvalSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            output: PathBuf::from("aqp-out"),
            data: DataConfig { infer_rows: 1000, ..DataConfig::default() },
            mask: MaskConfig::default(),
            train: TrainConfig { fidelity_rows: 10_000, ..TrainConfig::default() },
            cvae: CvaeConfig::default(),
            selest: ArConfig::default(),
            engine: EngineConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Module seeds present in the file, so the rest can follow the root seed.
#[derive(Debug, Clone, Copy, Default)]
struct ExplicitSeeds {
    cvae: bool,
    selest: bool,
}

fn has_key(value: &toml::Table, section: &str, key: &str) -> bool {
    value.get(section).and_then(|s| s.as_table()).is_some_and(|t| t.contains_key(key))
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: AppConfig,
    explicit: ExplicitSeeds,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(LoadedConfig { config: AppConfig::default(), explicit: ExplicitSeeds::default() });
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse { path: path.into(), source },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let parse = |source| ConfigError::Parse { path: PathBuf::from("<inline>"), source };
        let raw: toml::Table = toml::from_str(text).map_err(parse)?;
        let config: AppConfig = toml::from_str(text).map_err(parse)?;
        let explicit = ExplicitSeeds { cvae: has_key(&raw, "cvae", "seed"), selest: has_key(&raw, "selest", "seed") };
        Ok(LoadedConfig { config, explicit })
    }

    /// Final config with module seeds filled in from the root seed.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> Result<AppConfig, ConfigError> {
        if let Some(seed) = seed_flag {
            self.config.seed = seed;
        }
        let c = &mut self.config;
        if !self.explicit.cvae {
            c.cvae.seed = derive_seed(c.seed, "train");
        }
        if !self.explicit.selest {
            c.selest.seed = derive_seed(c.seed, "selest");
        }
        if c.cvae.mask_seed.is_none() {
            c.cvae.mask_seed = Some(c.mask.seed.unwrap_or_else(|| derive_seed(c.seed, "mask")));
        }
        c.validate()?;
        Ok(self.config)
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        MaskPolicy::new(self.mask.kind, self.mask.factor).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(ConfigError::Invalid(format!("data.holdout {} is outside [0, 1)", self.data.holdout)));
        }
        self.cvae.validate().map_err(|e| ConfigError::Invalid(format!("cvae: {e}")))?;
        if self.engine.n_samples == 0 {
            return Err(ConfigError::Invalid("engine.n_samples must be positive".into()));
        }
        if self.eval.count == 0 || self.eval.aggregates.is_empty() {
            return Err(ConfigError::Invalid("eval.count and eval.aggregates must be non-empty".into()));
        }
        Ok(())
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        MaskPolicy { kind: self.mask.kind, factor: self.mask.factor }
    }

    pub fn workload(&self) -> WorkloadSpec {
        WorkloadSpec {
            count: self.eval.count,
            aggregates: self.eval.aggregates.clone(),
            group_by: self.eval.group_by,
            seed: derive_seed(self.seed, "workload"),
            log_selectivity: self.eval.log_selectivity,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { engine: self.engine, seed: derive_seed(self.seed, "eval"), log_selectivity: self.eval.log_selectivity }
    }

    pub fn train_options(&self, schema: &aqp_core::dataset::Schema) -> Result<TrainOptions, ConfigError> {
        let discretize = self
            .train
            .discretize
            .iter()
            .map(|name| {
                schema.index_of(name).ok_or_else(|| ConfigError::Invalid(format!("train.discretize: unknown column {name:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainOptions {
            cvae: self.cvae.clone(),
            selest: self.selest.clone(),
            mask: self.mask_policy(),
            discretize,
            bins: self.train.bins,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = AppConfig::default();
        let back: AppConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn module_seeds_follow_root_unless_set() {
        let a = LoadedConfig::from_toml("seed = 3").unwrap().resolve(None).unwrap();
        let b = LoadedConfig::from_toml("seed = 4").unwrap().resolve(None).unwrap();
        assert_ne!(a.cvae.seed, b.cvae.seed);
        let c = LoadedConfig::from_toml("seed = 4\n[cvae]\nseed = 9").unwrap().resolve(Some(5)).unwrap();
        assert_eq!(c.cvae.seed, 9);
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(LoadedConfig::from_toml("[cvae]\nwidth = 3"), Err(ConfigError::Parse { .. })));
        let bad = LoadedConfig::from_toml("[mask]\nfactor = 1.5").unwrap().resolve(None);
        assert!(matches!(bad, Err(ConfigError::Invalid(_))));
        let kinds = LoadedConfig::from_toml("[mask]\nkind = \"random\"\n[eval]\naggregates = [\"SUM\", \"COUNT\"]").unwrap();
        assert_eq!(kinds.config.mask.kind, MaskKind::Random);
        assert_eq!(kinds.config.eval.aggregates, vec![Aggregate::Sum, Aggregate::Count]);
    }
}

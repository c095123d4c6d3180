use std::fs;
use std::path::Path;

use geocell::bench::BenchConfig;
use geocell::classifier::TrainConfig;
use geocell::dataset::SyntheticSpec;
use geocell::eval::ThresholdSet;
use geocell::partition::PartitionParams;
use geocell::sequence::{SequenceConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Loaded from TOML, then
/// overridden field by field from command-line flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub partition: PartitionParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sequence: SequenceSection,
    pub synthetic: SyntheticSpec,
    pub split: SplitSection,
    pub dedup: DedupSection,
    pub eval: EvalSection,
    pub bench: BenchConfig,
    pub end_to_end: EndToEndSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSection {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Unset means the variant's default.
    pub max_len: Option<usize>,
}

impl Default for SequenceSection {
    fn default() -> Self {
        let d = SequenceConfig::new(Variant::Basic);
        SequenceSection {
            hidden_dim: d.hidden_dim,
            learning_rate: d.learning_rate,
            epsilon: d.epsilon,
            epochs: d.epochs,
            batch_size: d.batch_size,
            max_len: None,
        }
    }
}

impl SequenceSection {
    pub fn resolve(&self, variant: Variant, seed: u64) -> SequenceConfig {
        let base = SequenceConfig::new(variant);
        SequenceConfig {
            variant,
            max_len: self.max_len.or(base.max_len),
            hidden_dim: self.hidden_dim,
            learning_rate: self.learning_rate,
            epsilon: self.epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupSection {
    pub threshold: u32,
}

impl Default for DedupSection {
    fn default() -> Self {
        DedupSection { threshold: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub thresholds: ThresholdSet,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: vec![1, 2, 3, 4, 5], thresholds: ThresholdSet::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndToEndSection {
    /// Seeds `S, S+1, ...` used for the trend report.
    pub trend_seeds: u64,
    /// Benchmark variant saved as `seq_model.json`.
    pub saved_variant: String,
}

impl Default for EndToEndSection {
    fn default() -> Self {
        EndToEndSection { trend_seeds: 5, saved_variant: "basic".into() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Prints the resolved configuration to stderr.
    pub fn log(&self, command: &str) {
        let json = serde_json::to_string(self).expect("config serializes");
        eprintln!("[{command}] config {json}");
    }
}

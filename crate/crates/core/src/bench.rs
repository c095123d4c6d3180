//! Synthetic album benchmark comparing single-image, album-averaging and
//! LSTM predictions at street level.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train, CellDistribution, Classifier, ModelConfig, TrainConfig};
use crate::dataset::{generate_synthetic, split, Album, Dataset, SyntheticData, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::localization_error_km;
use crate::partition::{build_partition, filter_covered, Partition, PartitionParams};
use crate::seed::sub_seed;
use crate::sequence::{average_baseline, predict_sequence, train_sequence, SequenceConfig, SequenceModel, Variant};

/// One LSTM configuration under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub variant: Variant,
    pub max_len: Option<usize>,
}

impl VariantSpec {
    fn new(name: &str, variant: Variant, max_len: Option<usize>) -> Self {
        VariantSpec { name: name.into(), variant, max_len }
    }
}

/// `lhs` must beat `rhs` by at least `min_gap` (absolute accuracy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRule {
    pub lhs: String,
    pub rhs: String,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
    pub partition: PartitionParams,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Template for every variant; `variant` and `max_len` are overridden.
    pub sequence: SequenceConfig,
    pub variants: Vec<VariantSpec>,
    pub radius_km: f64,
    pub rules: Vec<TrendRule>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut sequence = SequenceConfig::new(Variant::Basic);
        sequence.hidden_dim = 32;
        sequence.learning_rate = 0.1;
        sequence.epochs = 25;
        sequence.batch_size = 4;
        let rule = |lhs: &str, rhs: &str, min_gap| TrendRule { lhs: lhs.into(), rhs: rhs.into(), min_gap };
        BenchConfig {
            synthetic: SyntheticSpec { ambiguous_fraction: 0.6, ..SyntheticSpec::default() },
            train_fraction: 0.7,
            partition: PartitionParams { t1: 20, t2: 5, max_level: 14 },
            hidden: Vec::new(),
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            sequence,
            variants: vec![
                VariantSpec::new("basic", Variant::Basic, None),
                VariantSpec::new("offset1", Variant::Offset(1), None),
                VariantSpec::new("offset2", Variant::Offset(2), None),
                VariantSpec::new("repeated", Variant::Repeated, None),
                VariantSpec::new("repeated25", Variant::Repeated, Some(25)),
                VariantSpec::new("blstm25", Variant::Bidirectional, Some(25)),
            ],
            radius_km: 1.0,
            rules: vec![
                rule("avg", "single", 0.02),
                rule("basic", "avg", 0.02),
                rule("repeated", "basic", 0.0),
                rule("blstm25", "repeated25", 0.01),
            ],
        }
    }
}

/// Everything produced by one benchmark run.
pub struct BenchRun {
    pub seed: u64,
    pub data: SyntheticData,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub model: Classifier,
    pub sequence_models: Vec<(String, SequenceModel)>,
    /// Street-level accuracy per method.
    pub accuracy: BTreeMap<String, f64>,
}

fn hit_rate(albums: &[Album], preds: &[Vec<CellDistribution>], partition: &Partition, radius_km: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (album, dists) in albums.iter().zip(preds) {
        for (photo, d) in album.photos.iter().zip(dists) {
            total += 1;
            if localization_error_km(d.argmax(), &photo.geo, partition)? <= radius_km {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

/// Generates data from `seed`, trains every model and scores the test albums.
pub fn run_benchmark(cfg: &BenchConfig, seed: u64) -> Result<BenchRun> {
    let spec = SyntheticSpec { seed: sub_seed(seed, "data"), ..cfg.synthetic.clone() };
    let data = generate_synthetic(&spec)?;
    let (train_ds, test_ds) = split(&data.dataset, cfg.train_fraction, sub_seed(seed, "split"))?;
    let partition = build_partition(train_ds.records.iter().map(|r| r.geo), cfg.partition)?;

    let labeled: Vec<_> = filter_covered(train_ds.records.iter().cloned(), &partition).collect();
    let mcfg = ModelConfig {
        input_dim: spec.feature_dim,
        hidden: cfg.hidden.clone(),
        n_classes: partition.len(),
        seed: sub_seed(seed, "init"),
    };
    let tcfg = TrainConfig { seed: sub_seed(seed, "train"), ..cfg.train.clone() };
    let (model, _) = train(&labeled, &[], &partition, &mcfg, &tcfg)?;

    let train_albums = train_ds.albums();
    let test_albums = test_ds.albums();
    let mut accuracy = BTreeMap::new();

    let single: Vec<Vec<CellDistribution>> = test_albums
        .iter()
        .map(|a| a.photos.iter().map(|p| model.predict(&p.features)).collect())
        .collect::<Result<_>>()?;
    accuracy.insert("single".to_string(), hit_rate(&test_albums, &single, &partition, cfg.radius_km)?);
    let avg: Vec<Vec<CellDistribution>> =
        test_albums.iter().map(|a| average_baseline(&model, a)).collect::<Result<_>>()?;
    accuracy.insert("avg".to_string(), hit_rate(&test_albums, &avg, &partition, cfg.radius_km)?);

    let mut sequence_models = Vec::with_capacity(cfg.variants.len());
    for v in &cfg.variants {
        let scfg = SequenceConfig {
            variant: v.variant,
            max_len: v.max_len,
            seed: sub_seed(seed, &format!("seq/{}", v.name)),
            ..cfg.sequence.clone()
        };
        let (seq, _) = train_sequence(&train_albums, &model, &partition, &scfg)?;
        // Albums too short for a variant fall back to single-image predictions.
        let preds: Vec<Vec<CellDistribution>> = test_albums
            .iter()
            .zip(&single)
            .map(|(a, s)| {
                if a.photos.len() < v.variant.min_len() {
                    Ok(s.clone())
                } else {
                    predict_sequence(&seq, a)
                }
            })
            .collect::<Result<_>>()?;
        accuracy.insert(v.name.clone(), hit_rate(&test_albums, &preds, &partition, cfg.radius_km)?);
        sequence_models.push((v.name.clone(), seq));
    }

    Ok(BenchRun {
        seed,
        data,
        train: train_ds,
        test: test_ds,
        partition,
        model,
        sequence_models,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub lhs: String,
    pub rhs: String,
    pub min_gap: f64,
    pub lhs_median: f64,
    pub rhs_median: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub radius_km: f64,
    pub seeds: Vec<u64>,
    /// Accuracy per method, one entry per seed.
    pub per_seed: BTreeMap<String, Vec<f64>>,
    pub median: BTreeMap<String, f64>,
    pub checks: Vec<TrendCheck>,
    pub all_hold: bool,
}

impl TrendReport {
    pub fn from_runs(cfg: &BenchConfig, runs: &[BTreeMap<String, f64>], seeds: &[u64]) -> Result<Self> {
        let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in runs {
            for (k, v) in run {
                per_seed.entry(k.clone()).or_default().push(*v);
            }
        }
        let median: BTreeMap<String, f64> = per_seed
            .iter()
            .map(|(k, v)| (k.clone(), crate::eval::median(v).expect("at least one run")))
            .collect();
        let checks = cfg
            .rules
            .iter()
            .map(|r| {
                let get = |name: &str| {
                    median.get(name).copied().ok_or_else(|| Error::Config(format!("no method named {name:?}")))
                };
                let (l, rv) = (get(&r.lhs)?, get(&r.rhs)?);
                Ok(TrendCheck {
                    lhs: r.lhs.clone(),
                    rhs: r.rhs.clone(),
                    min_gap: r.min_gap,
                    lhs_median: l,
                    rhs_median: rv,
                    holds: l - rv >= r.min_gap - 1e-12,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrendReport {
            radius_km: cfg.radius_km,
            seeds: seeds.to_vec(),
            all_hold: checks.iter().all(|c| c.holds),
            per_seed,
            median,
            checks,
        })
    }
}

/// Independent runs for every seed, in parallel, returned in seed order.
pub fn run_benchmarks(cfg: &BenchConfig, seeds: &[u64]) -> Result<Vec<BenchRun>> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    seeds.par_iter().map(|&s| run_benchmark(cfg, s)).collect()
}

/// Runs the benchmark for every seed and checks the trend rules.
pub fn trend_report(cfg: &BenchConfig, seeds: &[u64]) -> Result<TrendReport> {
    let runs: Vec<_> = run_benchmarks(cfg, seeds)?.into_iter().map(|r| r.accuracy).collect();
    TrendReport::from_runs(cfg, &runs, seeds)
}

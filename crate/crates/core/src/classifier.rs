//! Single-image geolocation head.
//!
//! An MLP (tanh hidden layers, possibly none) maps a feature vector to logits
//! over partition cells. Training minimizes cross-entropy against one-hot cell
//! targets with mini-batch AdaGrad, stopping early once validation accuracy
//! stalls.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy_grad, softmax, Adagrad, Dense, ParamSet};
use crate::partition::{LabeledPhoto, Partition, PARTITION_FORMAT_VERSION};
use crate::seed;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden layer widths; empty gives a linear softmax model.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Width of the layer feeding the softmax.
    pub fn embedding_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a `min_improvement` gain in validation accuracy before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.045,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            min_improvement: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Probabilities over partition classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDistribution {
    pub probs: Vec<f64>,
}

impl CellDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Numeric("negative or NaN probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(CellDistribution { probs })
    }

    pub fn from_logits(logits: ArrayView1<f64>) -> Self {
        CellDistribution { probs: softmax(logits).to_vec() }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.top_k(1).map(|v| v[0].0).unwrap_or(0)
    }

    /// The `k` most probable classes, descending; ties go to the lower index.
    pub fn top_k(&self, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.probs.len() {
            return Err(Error::Config(format!("k={k} outside 1..={}", self.probs.len())));
        }
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        Ok(idx.into_iter().take(k).map(|c| (c, self.probs[c])).collect())
    }

    /// Arithmetic mean of several distributions over the same classes.
    pub fn mean(dists: &[CellDistribution]) -> Result<Self> {
        let first = dists.first().ok_or(Error::EmptyDataset)?;
        let mut acc = vec![0.0; first.len()];
        for d in dists {
            if d.len() != acc.len() {
                return Err(Error::DimensionMismatch { expected: acc.len(), got: d.len() });
            }
            acc.iter_mut().zip(&d.probs).for_each(|(a, p)| *a += p);
        }
        let n = dists.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(CellDistribution { probs: acc })
    }
}

pub fn top_k(dist: &CellDistribution, k: usize) -> Result<Vec<(usize, f64)>> {
    dist.top_k(k)
}

/// Trainable parameters: hidden layers then the softmax layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl ParamSet for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.hidden.iter().chain(std::iter::once(&self.output)).flat_map(|d| d.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
            .flat_map(|d| d.slices_mut())
            .collect()
    }
}

impl MlpParams {
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            hidden: self.hidden.iter().map(|d| Dense::zeros(d.fan_in(), d.fan_out())).collect(),
            output: Dense::zeros(self.output.fan_in(), self.output.fan_out()),
        }
    }

    /// Activations of every layer: input, each hidden layer.
    fn activations(&self, x: ArrayView1<f64>) -> Vec<Array1<f64>> {
        let mut acts = vec![x.to_owned()];
        for layer in &self.hidden {
            let a = layer.forward(acts.last().expect("non-empty").view()).mapv(f64::tanh);
            acts.push(a);
        }
        acts
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let acts = self.activations(x);
        self.output.forward(acts.last().expect("non-empty").view())
    }

    /// Mean cross-entropy over a batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, MlpParams) {
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        for &(x, label) in batch {
            let acts = self.activations(ArrayView1::from(x));
            let top = acts.last().expect("non-empty");
            let logits = self.output.forward(top.view());
            let (l, dlogits) = cross_entropy_grad(logits.view(), label);
            loss += l;
            let mut delta = self.output.backward(top.view(), dlogits.view(), &mut grad.output);
            for (k, layer) in self.hidden.iter().enumerate().rev() {
                let a = &acts[k + 1];
                let dz = &delta * &a.mapv(|t| 1.0 - t * t);
                delta = layer.backward(acts[k].view(), dz.view(), &mut grad.hidden[k]);
            }
        }
        let n = batch.len().max(1) as f64;
        grad.scale(1.0 / n);
        (loss / n, grad)
    }

    pub fn loss(&self, batch: &[(&[f64], usize)]) -> f64 {
        let n = batch.len().max(1) as f64;
        batch
            .iter()
            .map(|&(x, y)| {
                let z = self.logits(ArrayView1::from(x));
                crate::nn::log_sum_exp(z.view()) - z[y]
            })
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// A trained (or freshly initialized) single-image model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: MlpParams,
    /// Per-feature training mean; the default occlusion fill.
    pub feature_mean: Vec<f64>,
    pub partition_version: u32,
    pub partition_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: String,
    version: u32,
    #[serde(flatten)]
    model: Classifier,
}

impl Classifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim;
        for &h in &config.hidden {
            hidden.push(Dense::uniform(&mut rng, fan_in, h));
            fan_in = h;
        }
        let output = Dense::uniform(&mut rng, fan_in, config.n_classes);
        Ok(Classifier {
            feature_mean: vec![0.0; config.input_dim],
            params: MlpParams { hidden, output },
            partition_version: PARTITION_FORMAT_VERSION,
            partition_fingerprint: String::new(),
            config,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, got: features.len() });
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Array1<f64>> {
        self.check_dim(features)?;
        Ok(self.params.logits(ArrayView1::from(features)))
    }

    pub fn predict(&self, features: &[f64]) -> Result<CellDistribution> {
        Ok(CellDistribution::from_logits(self.logits(features)?.view()))
    }

    /// Activation of the layer below the softmax (the input itself for a linear model).
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        let acts = self.params.activations(ArrayView1::from(features));
        Ok(acts.last().expect("non-empty").to_vec())
    }

    pub fn accuracy(&self, data: &[(&[f64], usize)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|(x, y)| CellDistribution::from_logits(self.params.logits(ArrayView1::from(*x)).view()).argmax() == *y)
            .count();
        hits as f64 / data.len() as f64
    }

    fn check_examples(&self, data: &[(&[f64], usize)]) -> Result<()> {
        for &(x, y) in data {
            self.check_dim(x)?;
            if y >= self.config.n_classes {
                return Err(Error::LabelOutOfRange { label: y, n_classes: self.config.n_classes });
            }
        }
        Ok(())
    }

    /// Trains in place on `(features, class)` pairs.
    pub fn fit(&mut self, train: &[(&[f64], usize)], val: &[(&[f64], usize)], tcfg: &TrainConfig) -> Result<TrainLog> {
        tcfg.validate()?;
        self.check_examples(train)?;
        self.check_examples(val)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.config.input_dim;
        let mut mean = vec![0.0; d];
        for (x, _) in train {
            mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        self.feature_mean = mean;

        let mut opt = Adagrad::new(&self.params, tcfg.learning_rate, tcfg.epsilon);
        let mut rng = seed::rng(tcfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut log = TrainLog { initial_train_loss: self.params.loss(train), ..Default::default() };
        let mut best_acc = f64::NEG_INFINITY;
        let mut stale = 0;
        let mut batch = Vec::with_capacity(tcfg.batch_size);

        for epoch in 1..=tcfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(tcfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| train[i]));
                let (_, grad) = self.params.loss_and_grad(&batch);
                opt.step(&mut self.params, &grad);
            }
            let train_loss = self.params.loss(train);
            if !train_loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
            }
            let (val_loss, val_accuracy) = if val.is_empty() {
                (None, None)
            } else {
                (Some(self.params.loss(val)), Some(self.accuracy(val)))
            };
            log.epochs.push(EpochLog { epoch, train_loss, val_loss, val_accuracy });
            if let Some(acc) = val_accuracy {
                if acc > best_acc + tcfg.min_improvement {
                    best_acc = acc;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= tcfg.patience {
                        log.stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(log)
    }

    pub fn matches_partition(&self, partition: &Partition) -> bool {
        self.partition_version == partition.version() && self.partition_fingerprint == partition.fingerprint()
    }

    pub fn ensure_partition(&self, partition: &Partition) -> Result<()> {
        if !self.matches_partition(partition) {
            return Err(Error::VersionMismatch(format!(
                "model was trained on partition v{} {:?}, got v{} {:?}",
                self.partition_version,
                self.partition_fingerprint,
                partition.version(),
                partition.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint { kind: "geoclassifier".into(), version: CHECKPOINT_VERSION, model: self.clone() };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.kind != "geoclassifier" || ck.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!("checkpoint {} v{}", ck.kind, ck.version)));
        }
        let m = ck.model;
        m.config.validate()?;
        let expected = Classifier::new(m.config.clone())?;
        let shapes = |p: &MlpParams| p.slices().iter().map(|s| s.len()).collect::<Vec<_>>();
        if shapes(&expected.params) != shapes(&m.params) || m.feature_mean.len() != m.config.input_dim {
            return Err(Error::Config("checkpoint parameter shapes do not match its config".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Classifier::from_json(&fs::read_to_string(path)?)
    }

    /// Loads a checkpoint and refuses it unless it was trained on `partition`.
    pub fn load_for(path: impl AsRef<Path>, partition: &Partition) -> Result<Self> {
        let m = Classifier::load(path)?;
        m.ensure_partition(partition)?;
        Ok(m)
    }
}

/// Trains a classifier over partition classes from covered photos.
pub fn train(
    train_set: &[LabeledPhoto],
    val_set: &[LabeledPhoto],
    partition: &Partition,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Classifier, TrainLog)> {
    if mcfg.n_classes != partition.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the partition has {} cells",
            mcfg.n_classes,
            partition.len()
        )));
    }
    fn as_pairs(s: &[LabeledPhoto]) -> Vec<(&[f64], usize)> {
        s.iter().map(|p| (p.record.features.as_slice(), p.class)).collect()
    }
    let mut model = Classifier::new(mcfg.clone())?;
    model.partition_version = partition.version();
    model.partition_fingerprint = partition.fingerprint();
    let log = model.fit(&as_pairs(train_set), &as_pairs(val_set), tcfg)?;
    Ok((model, log))
}

/// Layout of a feature vector viewed as an image-like grid, row-major `(y, x, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    /// Per-channel average of a flat feature vector.
    pub fn channel_means(&self, features: &[f64]) -> Vec<f64> {
        let pixels = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| {
                let mut s = 0.0;
                for y in 0..self.height {
                    for x in 0..self.width {
                        s += features[self.index(y, x, c)];
                    }
                }
                s / pixels
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major probabilities of the true class.
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Slides a `window × window` occluder with `stride` over the grid and records
/// the probability of `true_class` at each position. Occluded cells take the
/// per-channel `fill`, or the model's per-channel training mean when `None`.
pub fn occlusion_map(
    model: &Classifier,
    features: &[f64],
    shape: GridShape,
    true_class: usize,
    window: usize,
    stride: usize,
    fill: Option<&[f64]>,
) -> Result<HeatMap> {
    if shape.len() != features.len() {
        return Err(Error::DimensionMismatch { expected: shape.len(), got: features.len() });
    }
    model.check_dim(features)?;
    if true_class >= model.n_classes() {
        return Err(Error::LabelOutOfRange { label: true_class, n_classes: model.n_classes() });
    }
    if window == 0 || stride == 0 || window > shape.height || window > shape.width {
        return Err(Error::Config(format!(
            "window {window} / stride {stride} invalid for a {}x{} grid",
            shape.height, shape.width
        )));
    }
    let default_fill;
    let fill = match fill {
        Some(f) if f.len() == shape.channels => f,
        Some(f) => return Err(Error::DimensionMismatch { expected: shape.channels, got: f.len() }),
        None => {
            default_fill = shape.channel_means(&model.feature_mean);
            &default_fill
        }
    };
    let rows = (shape.height - window) / stride + 1;
    let cols = (shape.width - window) / stride + 1;
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = features.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            buf.copy_from_slice(features);
            for y in r * stride..r * stride + window {
                for x in c * stride..c * stride + window {
                    for ch in 0..shape.channels {
                        buf[shape.index(y, x, ch)] = fill[ch];
                    }
                }
            }
            values.push(model.predict(&buf)?.probs[true_class]);
        }
    }
    Ok(HeatMap { rows, cols, values })
}

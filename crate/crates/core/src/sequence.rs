//! Album geolocation with LSTMs over frozen per-photo embeddings.
//!
//! Four ways of aligning the album with the softmax outputs:
//!
//! - `Basic`: one prediction per step, in chronological order.
//! - `Offset(k)`: the prediction for photo `i` is emitted at step `i + k`;
//!   the album is followed by `k` zero inputs so every photo gets one.
//! - `Repeated`: the album is fed twice and only the second pass predicts.
//! - `Bidirectional`: a forward and a backward LSTM, their states
//!   concatenated into the softmax.
//!
//! Albums longer than `max_len` are cut into consecutive chunks, each an
//! independent sequence starting from a zero state.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::classifier::{CellDistribution, Classifier};
use crate::dataset::{Album, PhotoRecord};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_grad, sigmoid, Adagrad, Dense, ParamSet};
use crate::partition::Partition;
use crate::seed;

/// Gate weights stacked as `[input; forget; output; candidate]`, each `H` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input weights, `4H × E`.
    pub w: Array2<f64>,
    /// Recurrent weights, `4H × H`.
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: Array1::zeros(hidden), c: Array1::zeros(hidden) }
    }
}

impl LstmParams {
    /// Uniform `±1/√(E+H)` weights, zero biases except the forget gate at `+1`.
    pub fn new(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / ((input_dim + hidden) as f64).sqrt();
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmParams {
            w: Array2::from_shape_fn((4 * hidden, input_dim), |_| rng.random_range(-bound..=bound)),
            u: Array2::from_shape_fn((4 * hidden, hidden), |_| rng.random_range(-bound..=bound)),
            b,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * hidden, input_dim)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.ncols()
    }
}

impl ParamSet for LstmParams {
    fn slices(&self) -> Vec<&[f64]> {
        [&self.w, &self.u]
            .into_iter()
            .map(|a| a.as_slice().expect("standard layout"))
            .chain(std::iter::once(self.b.as_slice().expect("standard layout")))
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.u.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

struct StepCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    o: Array1<f64>,
    g: Array1<f64>,
    tanh_c: Array1<f64>,
}

fn step_cached(p: &LstmParams, x: ArrayView1<f64>, state: &LstmState) -> (LstmState, StepCache) {
    let hd = p.hidden_dim();
    let z = p.w.dot(&x) + p.u.dot(&state.h) + &p.b;
    let i = z.slice(s![0..hd]).mapv(sigmoid);
    let f = z.slice(s![hd..2 * hd]).mapv(sigmoid);
    let o = z.slice(s![2 * hd..3 * hd]).mapv(sigmoid);
    let g = z.slice(s![3 * hd..4 * hd]).mapv(f64::tanh);
    let c = &f * &state.c + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let cache = StepCache {
        x: x.to_owned(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        i,
        f,
        o,
        g,
        tanh_c,
    };
    (LstmState { h, c }, cache)
}

/// One LSTM step; the new `h` is also the step output.
pub fn lstm_step(params: &LstmParams, x: &[f64], state: &LstmState) -> Result<LstmState> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch { expected: params.input_dim(), got: x.len() });
    }
    if state.h.len() != params.hidden_dim() || state.c.len() != params.hidden_dim() {
        return Err(Error::DimensionMismatch { expected: params.hidden_dim(), got: state.h.len() });
    }
    Ok(step_cached(params, ArrayView1::from(x), state).0)
}

fn forward_seq(p: &LstmParams, xs: &[Array1<f64>]) -> (Vec<Array1<f64>>, Vec<StepCache>) {
    let mut state = LstmState::zeros(p.hidden_dim());
    let mut hs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = step_cached(p, x.view(), &state);
        hs.push(next.h.clone());
        caches.push(cache);
        state = next;
    }
    (hs, caches)
}

/// Backpropagation through time given `dL/dh_t` for every step.
fn backward_seq(p: &LstmParams, caches: &[StepCache], dhs: &[Array1<f64>], grad: &mut LstmParams) {
    let hd = p.hidden_dim();
    let mut dh_next = Array1::<f64>::zeros(hd);
    let mut dc_next = Array1::<f64>::zeros(hd);
    let mut dz = Array1::<f64>::zeros(4 * hd);
    for (cache, dh_out) in caches.iter().zip(dhs).rev() {
        let dh = dh_out + &dh_next;
        let d_o = &dh * &cache.tanh_c;
        let dc = &dh * &cache.o * &cache.tanh_c.mapv(|t| 1.0 - t * t) + &dc_next;
        let di = &dc * &cache.g;
        let dg = &dc * &cache.i;
        let df = &dc * &cache.c_prev;
        dc_next = &dc * &cache.f;
        dz.slice_mut(s![0..hd]).assign(&(&di * &cache.i.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![hd..2 * hd]).assign(&(&df * &cache.f.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![2 * hd..3 * hd]).assign(&(&d_o * &cache.o.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![3 * hd..4 * hd]).assign(&(&dg * &cache.g.mapv(|v| 1.0 - v * v)));
        for (r, &g) in dz.iter().enumerate() {
            if g != 0.0 {
                grad.w.row_mut(r).scaled_add(g, &cache.x);
                grad.u.row_mut(r).scaled_add(g, &cache.h_prev);
            }
        }
        grad.b += &dz;
        dh_next = p.u.t().dot(&dz);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Basic,
    Offset(usize),
    Repeated,
    Bidirectional,
}

impl Variant {
    /// Minimum album length the variant can be trained or run on.
    pub fn min_len(&self) -> usize {
        match self {
            Variant::Offset(k) => k + 1,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Basic => f.write_str("basic"),
            Variant::Offset(k) => write!(f, "offset{k}"),
            Variant::Repeated => f.write_str("repeated"),
            Variant::Bidirectional => f.write_str("blstm"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "repeated" => Ok(Variant::Repeated),
            "blstm" | "bidirectional" => Ok(Variant::Bidirectional),
            _ => s
                .strip_prefix("offset")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(Variant::Offset)
                .ok_or_else(|| Error::Config(format!("unknown sequence variant {s:?}"))),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

pub const BIDIRECTIONAL_MAX_LEN: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub variant: Variant,
    /// Chunk length; `None` runs whole albums.
    pub max_len: Option<usize>,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Sequences per AdaGrad step.
    pub batch_size: usize,
    pub seed: u64,
}

impl SequenceConfig {
    pub fn new(variant: Variant) -> Self {
        SequenceConfig {
            variant,
            max_len: (variant == Variant::Bidirectional).then_some(BIDIRECTIONAL_MAX_LEN),
            hidden_dim: 128,
            learning_rate: 0.045,
            epsilon: 1e-8,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.max_len {
            if m < 2 {
                return Err(Error::Config(format!("max sequence length {m} < 2")));
            }
            if m < self.variant.min_len() {
                return Err(Error::Config(format!("max length {m} too short for {}", self.variant)));
            }
        }
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden dim and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// The trainable part of a sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqParams {
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
    pub head: Dense,
}

impl ParamSet for SeqParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.forward.slices();
        if let Some(b) = &self.backward {
            v.extend(b.slices());
        }
        v.extend(self.head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.forward.slices_mut();
        if let Some(b) = &mut self.backward {
            v.extend(b.slices_mut());
        }
        v.extend(self.head.slices_mut());
        v
    }
}

impl SeqParams {
    pub fn new(rng: &mut impl Rng, variant: Variant, input_dim: usize, hidden: usize, n_classes: usize) -> Self {
        let forward = LstmParams::new(rng, input_dim, hidden);
        let backward = (variant == Variant::Bidirectional).then(|| LstmParams::new(rng, input_dim, hidden));
        let head_in = if backward.is_some() { 2 * hidden } else { hidden };
        SeqParams { forward, backward, head: Dense::uniform(rng, head_in, n_classes) }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &LstmParams| LstmParams::zeros(p.input_dim(), p.hidden_dim());
        SeqParams {
            forward: z(&self.forward),
            backward: self.backward.as_ref().map(z),
            head: Dense::zeros(self.head.fan_in(), self.head.fan_out()),
        }
    }

    /// Per-photo logits for one sequence, plus the mean cross-entropy and its
    /// gradient when `labels` are given.
    pub fn forward_backward(
        &self,
        variant: Variant,
        xs: &[Array1<f64>],
        labels: Option<&[usize]>,
    ) -> (Vec<Array1<f64>>, Option<(f64, SeqParams)>) {
        let n = xs.len();
        match variant {
            Variant::Bidirectional => self.run_bidirectional(xs, labels),
            _ => {
                // (input sequence, first emitting step)
                let (inputs, first): (Vec<Array1<f64>>, usize) = match variant {
                    Variant::Basic => (xs.to_vec(), 0),
                    Variant::Offset(k) => {
                        let pad = Array1::zeros(self.forward.input_dim());
                        (xs.iter().cloned().chain(std::iter::repeat_n(pad, k)).collect(), k)
                    }
                    Variant::Repeated => (xs.iter().chain(xs).cloned().collect(), n),
                    Variant::Bidirectional => unreachable!(),
                };
                let (hs, caches) = forward_seq(&self.forward, &inputs);
                let logits: Vec<Array1<f64>> = hs[first..first + n].iter().map(|h| self.head.forward(h.view())).collect();
                let Some(labels) = labels else {
                    return (logits, None);
                };
                let mut grad = self.zeros_like();
                let mut loss = 0.0;
                let mut dhs = vec![Array1::zeros(self.forward.hidden_dim()); inputs.len()];
                let scale = 1.0 / n as f64;
                for (t, (z, &y)) in logits.iter().zip(labels).enumerate() {
                    let (l, dz) = cross_entropy_grad(z.view(), y);
                    loss += l * scale;
                    let dz = dz * scale;
                    dhs[first + t] = self.head.backward(hs[first + t].view(), dz.view(), &mut grad.head);
                }
                backward_seq(&self.forward, &caches, &dhs, &mut grad.forward);
                (logits, Some((loss, grad)))
            }
        }
    }

    fn run_bidirectional(
        &self,
        xs: &[Array1<f64>],
        labels: Option<&[usize]>,
    ) -> (Vec<Array1<f64>>, Option<(f64, SeqParams)>) {
        let n = xs.len();
        let bwd = self.backward.as_ref().expect("bidirectional model has a backward LSTM");
        let reversed: Vec<Array1<f64>> = xs.iter().rev().cloned().collect();
        let (hf, cf) = forward_seq(&self.forward, xs);
        let (hb_rev, cb) = forward_seq(bwd, &reversed);
        let joint: Vec<Array1<f64>> = (0..n)
            .map(|t| concatenate(Axis(0), &[hf[t].view(), hb_rev[n - 1 - t].view()]).expect("same rank"))
            .collect();
        let logits: Vec<Array1<f64>> = joint.iter().map(|h| self.head.forward(h.view())).collect();
        let Some(labels) = labels else {
            return (logits, None);
        };
        let hd = self.forward.hidden_dim();
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        let mut dhf = vec![Array1::zeros(hd); n];
        let mut dhb_rev = vec![Array1::zeros(bwd.hidden_dim()); n];
        let scale = 1.0 / n as f64;
        for t in 0..n {
            let (l, dz) = cross_entropy_grad(logits[t].view(), labels[t]);
            loss += l * scale;
            let dz = dz * scale;
            let dj = self.head.backward(joint[t].view(), dz.view(), &mut grad.head);
            dhf[t] = dj.slice(s![0..hd]).to_owned();
            dhb_rev[n - 1 - t] = dj.slice(s![hd..]).to_owned();
        }
        backward_seq(&self.forward, &cf, &dhf, &mut grad.forward);
        backward_seq(bwd, &cb, &dhb_rev, grad.backward.as_mut().expect("zeros_like keeps shape"));
        (logits, Some((loss, grad)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrainLog {
    pub sequences: usize,
    /// Albums (or chunks) too short for the variant.
    pub skipped: usize,
    /// Album photos outside the partition, dropped before training.
    pub uncovered_photos: usize,
    pub epoch_losses: Vec<f64>,
}

/// An LSTM head over a frozen single-image model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub config: SequenceConfig,
    pub params: SeqParams,
    pub image_model: Classifier,
}

#[derive(Serialize, Deserialize)]
struct SeqCheckpoint {
    kind: String,
    version: u32,
    #[serde(flatten)]
    model: SequenceModel,
}

fn chunks<T>(items: &[T], max_len: Option<usize>) -> impl Iterator<Item = &[T]> {
    items.chunks(max_len.unwrap_or(usize::MAX).max(1))
}

impl SequenceModel {
    pub fn new(config: SequenceConfig, image_model: Classifier) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let params = SeqParams::new(
            &mut rng,
            config.variant,
            image_model.config.embedding_dim(),
            config.hidden_dim,
            image_model.n_classes(),
        );
        Ok(SequenceModel { config, params, image_model })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn embed_all(&self, photos: &[PhotoRecord]) -> Result<Vec<Array1<f64>>> {
        photos.iter().map(|p| self.image_model.embed(&p.features).map(Array1::from)).collect()
    }

    /// Mean cross-entropy of one already-embedded sequence and its gradient.
    pub fn loss_and_grad(&self, embeddings: &[Array1<f64>], labels: &[usize]) -> Result<(f64, SeqParams)> {
        if embeddings.len() != labels.len() || embeddings.len() < self.variant().min_len() {
            return Err(Error::Sequence(format!(
                "{} needs at least {} labelled steps, got {}",
                self.variant(),
                self.variant().min_len(),
                embeddings.len()
            )));
        }
        let (_, out) = self.params.forward_backward(self.variant(), embeddings, Some(labels));
        Ok(out.expect("labels given"))
    }

    /// Per-photo logits for embedded photos, chunked by `max_len`.
    pub fn logits(&self, embeddings: &[Array1<f64>]) -> Vec<Array1<f64>> {
        chunks(embeddings, self.config.max_len)
            .flat_map(|c| self.params.forward_backward(self.variant(), c, None).0)
            .collect()
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        let ck = SeqCheckpoint { kind: "sequence".into(), version: crate::classifier::CHECKPOINT_VERSION, model: self.clone() };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: SeqCheckpoint = serde_json::from_str(text)?;
        if ck.kind != "sequence" || ck.version != crate::classifier::CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!("checkpoint {} v{}", ck.kind, ck.version)));
        }
        ck.model.config.validate()?;
        let expect_bwd = ck.model.config.variant == Variant::Bidirectional;
        if ck.model.params.backward.is_some() != expect_bwd
            || ck.model.params.forward.input_dim() != ck.model.image_model.config.embedding_dim()
            || ck.model.params.head.fan_out() != ck.model.image_model.n_classes()
        {
            return Err(Error::Config("sequence checkpoint shapes do not match its config".into()));
        }
        Ok(ck.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_for(path: impl AsRef<Path>, partition: &Partition) -> Result<Self> {
        let m = SequenceModel::from_json(&fs::read_to_string(path)?)?;
        m.image_model.ensure_partition(partition)?;
        Ok(m)
    }
}

/// Trains the LSTM and softmax layers; the image model stays fixed.
pub fn train_sequence(
    albums: &[Album],
    image_model: &Classifier,
    partition: &Partition,
    cfg: &SequenceConfig,
) -> Result<(SequenceModel, SequenceTrainLog)> {
    image_model.ensure_partition(partition)?;
    let mut model = SequenceModel::new(cfg.clone(), image_model.clone())?;
    let mut log = SequenceTrainLog::default();

    let mut seqs: Vec<(Vec<Array1<f64>>, Vec<usize>)> = Vec::new();
    for album in albums {
        let mut xs = Vec::with_capacity(album.photos.len());
        let mut ys = Vec::with_capacity(album.photos.len());
        for p in &album.photos {
            match partition.class_of(&p.geo) {
                Some(c) => {
                    xs.push(Array1::from(image_model.embed(&p.features)?));
                    ys.push(c);
                }
                None => log.uncovered_photos += 1,
            }
        }
        if xs.len() < cfg.variant.min_len() {
            log.skipped += 1;
            continue;
        }
        for (cx, cy) in chunks(&xs, cfg.max_len).zip(chunks(&ys, cfg.max_len)) {
            if cx.len() < cfg.variant.min_len() {
                log.skipped += 1;
            } else {
                seqs.push((cx.to_vec(), cy.to_vec()));
            }
        }
    }
    log.sequences = seqs.len();
    if seqs.is_empty() {
        return Ok((model, log));
    }

    let mut opt = Adagrad::new(&model.params, cfg.learning_rate, cfg.epsilon);
    let mut rng = seed::rng(seed::sub_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.params.zeros_like();
            for &k in batch {
                let (xs, ys) = &seqs[k];
                let (_, out) = model.params.forward_backward(cfg.variant, xs, Some(ys));
                let (l, g) = out.expect("labels given");
                epoch_loss += l;
                for (acc, part) in grad.slices_mut().into_iter().zip(g.slices()) {
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grad);
        }
        let mean = epoch_loss / seqs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("sequence loss diverged at epoch {}", epoch + 1)));
        }
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}

/// One distribution per photo of a chronologically ordered album.
pub fn predict_sequence(model: &SequenceModel, album: &Album) -> Result<Vec<CellDistribution>> {
    let min = model.variant().min_len();
    if album.photos.len() < min {
        return Err(Error::Sequence(format!(
            "{} needs albums of at least {min} photos, got {}",
            model.variant(),
            album.photos.len()
        )));
    }
    let xs = model.embed_all(&album.photos)?;
    Ok(model.logits(&xs).iter().map(|z| CellDistribution::from_logits(z.view())).collect())
}

/// Every photo gets the mean of the album's single-image distributions.
pub fn average_baseline(model: &Classifier, album: &Album) -> Result<Vec<CellDistribution>> {
    if album.photos.is_empty() {
        return Err(Error::Sequence("empty album".into()));
    }
    let dists = album.photos.iter().map(|p| model.predict(&p.features)).collect::<Result<Vec<_>>>()?;
    let mean = CellDistribution::mean(&dists)?;
    Ok(vec![mean; album.photos.len()])
}

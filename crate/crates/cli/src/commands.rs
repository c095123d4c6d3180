use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use geocell::bench::{run_benchmarks, TrendReport};
use geocell::classifier::{occlusion_map, train as train_classifier, CellDistribution, Classifier, GridShape, ModelConfig};
use geocell::dataset::{dedup_filter, generate_synthetic, load_jsonl, split, write_jsonl, Dataset, SyntheticSpec};
use geocell::eval::{evaluate, EvalReport, ThresholdSet};
use geocell::partition::{build_partition as build, filter_covered, Partition};
use geocell::seed::sub_seed;
use geocell::sequence::{predict_sequence, train_sequence, SequenceModel, Variant};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, Common};

type CmdResult = Result<(), CliError>;

/// Loads the config, applies flag overrides, logs it and creates the output dir.
fn setup(common: &Common, command: &str, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    apply(&mut cfg);
    cfg.log(command);
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

/// Comma-separated integers.
#[derive(Debug, Clone)]
pub struct UsizeList(Vec<usize>);

fn parse_usize_list(s: &str) -> Result<UsizeList, String> {
    parse_list(s).map(UsizeList)
}

#[derive(Debug, Args)]
pub struct BuildPartitionArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL photo records.
    #[arg(long)]
    input: PathBuf,
    /// Maximum photos per cell before it is split.
    #[arg(long)]
    t1: Option<u64>,
    /// Minimum photos for a cell to be kept.
    #[arg(long)]
    t2: Option<u64>,
    #[arg(long)]
    max_level: Option<usize>,
}

pub fn build_partition(a: BuildPartitionArgs) -> CmdResult {
    let cfg = setup(&a.common, "build-partition", |c| {
        if let Some(v) = a.t1 {
            c.partition.t1 = v;
        }
        if let Some(v) = a.t2 {
            c.partition.t2 = v;
        }
        if let Some(v) = a.max_level {
            c.partition.max_level = v;
        }
    })?;
    let ds = load_jsonl(&a.input)?;
    let partition = build(ds.records.iter().map(|r| r.geo), cfg.partition)?;
    partition.save(a.common.out.join("partition.json"))?;
    let stats = partition.stats();
    write_json(&a.common.out.join("partition_stats.json"), &stats)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Test records closer than this many bits to a training record are dropped.
    #[arg(long)]
    threshold: Option<u32>,
}

pub fn dedup(a: DedupArgs) -> CmdResult {
    let cfg = setup(&a.common, "dedup", |c| {
        if let Some(t) = a.threshold {
            c.dedup.threshold = t;
        }
    })?;
    let train = load_jsonl(&a.train)?;
    let test = load_jsonl(&a.test)?;
    let kept = dedup_filter(&test, &train, cfg.dedup.threshold)?;
    write_jsonl(&kept, a.common.out.join("test_dedup.jsonl"))?;
    println!("{{\"kept\":{},\"removed\":{}}}", kept.len(), test.len() - kept.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hotspots: Option<usize>,
    #[arg(long)]
    photos_per_hotspot: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    ambiguous_fraction: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

pub fn gen_synthetic(a: GenSyntheticArgs) -> CmdResult {
    let cfg = setup(&a.common, "gen-synthetic", |c| {
        let s = &mut c.synthetic;
        s.n_hotspots = a.hotspots.unwrap_or(s.n_hotspots);
        s.photos_per_hotspot = a.photos_per_hotspot.unwrap_or(s.photos_per_hotspot);
        s.feature_dim = a.feature_dim.unwrap_or(s.feature_dim);
        s.noise_sigma = a.noise_sigma.unwrap_or(s.noise_sigma);
        s.label_noise = a.label_noise.unwrap_or(s.label_noise);
        s.ambiguous_fraction = a.ambiguous_fraction.unwrap_or(s.ambiguous_fraction);
        if let Some(f) = a.train_fraction {
            c.split.train_fraction = f;
        }
    })?;
    let spec = SyntheticSpec { seed: sub_seed(cfg.seed, "data"), ..cfg.synthetic.clone() };
    let data = generate_synthetic(&spec)?;
    let (train, test) = split(&data.dataset, cfg.split.train_fraction, sub_seed(cfg.seed, "split"))?;
    let out = &a.common.out;
    write_jsonl(&data.dataset, out.join("dataset.jsonl"))?;
    write_jsonl(&train, out.join("train.jsonl"))?;
    write_jsonl(&test, out.join("test.jsonl"))?;
    println!("{{\"photos\":{},\"train\":{},\"test\":{}}}", data.dataset.len(), train.len(), test.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: PathBuf,
    /// Validation set for early stopping.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    partition: PathBuf,
    /// Hidden layer widths, comma separated; empty for a linear model.
    #[arg(long, value_parser = parse_usize_list)]
    hidden: Option<UsizeList>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = setup(&a.common, "train", |c| {
        if let Some(h) = &a.hidden {
            c.model.hidden = h.0.clone();
        }
        c.train.epochs = a.epochs.unwrap_or(c.train.epochs);
        c.train.learning_rate = a.learning_rate.unwrap_or(c.train.learning_rate);
        c.train.batch_size = a.batch_size.unwrap_or(c.train.batch_size);
    })?;
    let partition = Partition::load(&a.partition)?;
    let train_ds = load_jsonl(&a.train)?;
    let dim = train_ds.feature_dim().ok_or(geocell::Error::EmptyDataset)?;
    let labeled: Vec<_> = filter_covered(train_ds.records.iter().cloned(), &partition).collect();
    eprintln!("[train] {} of {} photos fall in partition cells", labeled.len(), train_ds.len());
    let val = match &a.val {
        Some(p) => filter_covered(load_jsonl(p)?.records.into_iter(), &partition).collect(),
        None => Vec::new(),
    };
    let mcfg = ModelConfig {
        input_dim: dim,
        hidden: cfg.model.hidden.clone(),
        n_classes: partition.len(),
        seed: sub_seed(cfg.seed, "init"),
    };
    let tcfg = geocell::classifier::TrainConfig { seed: sub_seed(cfg.seed, "train"), ..cfg.train.clone() };
    let (model, log) = train_classifier(&labeled, &val, &partition, &mcfg, &tcfg)?;
    model.save(a.common.out.join("model.json"))?;
    write_json(&a.common.out.join("train_log.json"), &log)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainSeqArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    /// Frozen single-image model.
    #[arg(long)]
    model: PathBuf,
    /// basic, offset1, offset2, repeated or blstm.
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

pub fn train_seq(a: TrainSeqArgs) -> CmdResult {
    let cfg = setup(&a.common, "train-seq", |c| {
        let s = &mut c.sequence;
        s.hidden_dim = a.hidden_dim.unwrap_or(s.hidden_dim);
        s.epochs = a.epochs.unwrap_or(s.epochs);
        s.learning_rate = a.learning_rate.unwrap_or(s.learning_rate);
        if a.max_len.is_some() {
            s.max_len = a.max_len;
        }
    })?;
    let partition = Partition::load(&a.partition)?;
    let model = Classifier::load_for(&a.model, &partition)?;
    let albums = load_jsonl(&a.train)?.albums();
    let scfg = cfg.sequence.resolve(a.variant, sub_seed(cfg.seed, "seq"));
    let (seq, log) = train_sequence(&albums, &model, &partition, &scfg)?;
    if log.skipped > 0 {
        eprintln!("[train-seq] warning: {} albums or chunks too short for {}", log.skipped, a.variant);
    }
    seq.save(a.common.out.join("seq_model.json"))?;
    write_json(&a.common.out.join("seq_log.json"), &log)?;
    Ok(())
}

/// Distributions aligned with `ds.records`. Album members go through the
/// sequence model when one is given; everything else is predicted alone.
fn predict_records(model: &Classifier, seq: Option<&SequenceModel>, ds: &Dataset) -> Result<Vec<CellDistribution>, CliError> {
    let mut by_id: HashMap<String, CellDistribution> = HashMap::new();
    if let Some(seq) = seq {
        for album in ds.albums() {
            if album.photos.len() < seq.variant().min_len() {
                eprintln!("warning: album {} too short for {}; using single-image predictions", album.album_id, seq.variant());
                continue;
            }
            for (p, d) in album.photos.iter().zip(predict_sequence(seq, &album)?) {
                by_id.insert(p.id.clone(), d);
            }
        }
    }
    ds.records
        .iter()
        .map(|r| match by_id.remove(&r.id) {
            Some(d) => Ok(d),
            None => Ok(model.predict(&r.features)?),
        })
        .collect()
}

fn load_models(
    partition: &Partition,
    model: &Path,
    seq: Option<&Path>,
) -> Result<(Classifier, Option<SequenceModel>), CliError> {
    let m = Classifier::load_for(model, partition)?;
    let s = seq.map(|p| SequenceModel::load_for(p, partition)).transpose()?;
    Ok((m, s))
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seq_model: Option<PathBuf>,
    /// Rows per photo.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Serialize)]
struct InferRow<'a> {
    id: &'a str,
    rank: usize,
    cell: String,
    lat: f64,
    lon: f64,
    prob: f64,
}

pub fn infer(a: InferArgs) -> CmdResult {
    setup(&a.common, "infer", |_| {})?;
    let partition = Partition::load(&a.partition)?;
    let (model, seq) = load_models(&partition, &a.model, a.seq_model.as_deref())?;
    let ds = load_jsonl(&a.input)?;
    let dists = predict_records(&model, seq.as_ref(), &ds)?;
    let k = a.k.min(partition.len());
    let mut w = BufWriter::new(fs::File::create(a.common.out.join("predictions.jsonl"))?);
    for (r, d) in ds.records.iter().zip(&dists) {
        for (rank, (class, prob)) in d.top_k(k)?.into_iter().enumerate() {
            let center = partition.center(class).expect("class from partition");
            let row = InferRow {
                id: &r.id,
                rank: rank + 1,
                cell: partition.cells()[class].token(),
                lat: center.lat,
                lon: center.lon,
                prob,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seq_model: Option<PathBuf>,
    /// Comma-separated k values for the top-k curves.
    #[arg(long, value_parser = parse_usize_list)]
    ks: Option<UsizeList>,
    /// Radii as `name=km,...`.
    #[arg(long, value_parser = |s: &str| ThresholdSet::parse(s).map_err(|e| e.to_string()))]
    thresholds: Option<ThresholdSet>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let cfg = setup(&a.common, "eval", |c| {
        if let Some(ks) = &a.ks {
            c.eval.ks = ks.0.clone();
        }
        if let Some(t) = &a.thresholds {
            c.eval.thresholds = t.clone();
        }
    })?;
    if cfg.eval.ks.contains(&0) {
        return Err(CliError::usage("k must be at least 1"));
    }
    let partition = Partition::load(&a.partition)?;
    let (model, seq) = load_models(&partition, &a.model, a.seq_model.as_deref())?;
    let ds = load_jsonl(&a.test)?;
    let dists = predict_records(&model, seq.as_ref(), &ds)?;
    let echo = serde_json::to_value(&cfg.eval)?;
    let report = EvalReport::from_distributions(&dists, &ds.records, &partition, &cfg.eval.ks, &cfg.eval.thresholds, echo)?;
    report.write(&a.common.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    /// Id of the photo to analyse.
    #[arg(long)]
    id: String,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Class whose probability is mapped; defaults to the photo's own cell.
    #[arg(long)]
    class: Option<usize>,
}

pub fn heatmap(a: HeatmapArgs) -> CmdResult {
    setup(&a.common, "heatmap", |_| {})?;
    let partition = Partition::load(&a.partition)?;
    let model = Classifier::load_for(&a.model, &partition)?;
    let ds = load_jsonl(&a.input)?;
    let photo = ds
        .records
        .iter()
        .find(|r| r.id == a.id)
        .ok_or_else(|| CliError { code: 2, message: format!("no photo with id {:?}", a.id) })?;
    let class = match a.class {
        Some(c) => c,
        None => partition
            .class_of(&photo.geo)
            .ok_or_else(|| CliError { code: 2, message: format!("photo {:?} is outside every cell; pass --class", a.id) })?,
    };
    let shape = GridShape { height: a.height, width: a.width, channels: a.channels };
    let map = occlusion_map(&model, &photo.features, shape, class, a.window, a.stride, None)?;

    let mut pgm = format!("P2\n{} {}\n255\n", map.cols, map.rows);
    let mut csv = String::from("row,col,prob\n");
    for r in 0..map.rows {
        let line: Vec<String> = (0..map.cols).map(|c| ((map.get(r, c) * 255.0).round() as u8).to_string()).collect();
        pgm.push_str(&line.join(" "));
        pgm.push('\n');
        for c in 0..map.cols {
            writeln!(csv, "{r},{c},{}", map.get(r, c)).expect("write to string");
        }
    }
    fs::write(a.common.out.join("heatmap.pgm"), pgm)?;
    fs::write(a.common.out.join("heatmap.csv"), csv)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EndToEndArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds in the trend report.
    #[arg(long)]
    trend_seeds: Option<u64>,
}

pub const MANIFEST_ARTIFACTS: [&str; 7] = [
    "dataset.jsonl",
    "partition.json",
    "model.json",
    "seq_model.json",
    "report.json",
    "curves.csv",
    "trends.json",
];

pub fn end_to_end(a: EndToEndArgs) -> CmdResult {
    let cfg = setup(&a.common, "end-to-end", |c| {
        if let Some(n) = a.trend_seeds {
            c.end_to_end.trend_seeds = n;
        }
    })?;
    if cfg.end_to_end.trend_seeds == 0 {
        return Err(CliError::usage("trend_seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..cfg.end_to_end.trend_seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let runs = run_benchmarks(&cfg.bench, &seeds)?;
    let accuracies: Vec<_> = runs.iter().map(|r| r.accuracy.clone()).collect();
    let trends = TrendReport::from_runs(&cfg.bench, &accuracies, &seeds)?;
    let run = runs.into_iter().next().expect("at least one seed");

    let out = &a.common.out;
    write_jsonl(&run.data.dataset, out.join("dataset.jsonl"))?;
    run.partition.save(out.join("partition.json"))?;
    run.model.save(out.join("model.json"))?;
    let (_, seq) = run
        .sequence_models
        .iter()
        .find(|(name, _)| *name == cfg.end_to_end.saved_variant)
        .ok_or_else(|| CliError::usage(format!("no benchmark variant named {:?}", cfg.end_to_end.saved_variant)))?;
    seq.save(out.join("seq_model.json"))?;
    let echo = serde_json::to_value(&cfg.eval)?;
    let report = evaluate(&run.model, &run.test.records, &run.partition, &cfg.eval.ks, &cfg.eval.thresholds, echo)?;
    report.write(out)?;
    write_json(&out.join("trends.json"), &trends)?;

    let mut manifest = String::new();
    for name in MANIFEST_ARTIFACTS {
        let digest = Sha256::digest(fs::read(out.join(name))?);
        writeln!(manifest, "{}  {name}", hex::encode(digest)).expect("write to string");
    }
    fs::write(out.join("MANIFEST"), manifest)?;

    for c in &trends.checks {
        eprintln!(
            "[end-to-end] {} {:.4} vs {} {:.4} (gap >= {}): {}",
            c.lhs,
            c.lhs_median,
            c.rhs,
            c.rhs_median,
            c.min_gap,
            if c.holds { "holds" } else { "FAILS" }
        );
    }
    Ok(())
}

//! Localization metrics: threshold accuracy, top-k curves, group medians and
//! retrieval mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{CellDistribution, Classifier};
use crate::dataset::PhotoRecord;
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::sphere::GeoPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub name: String,
    pub radius_km: f64,
}

/// Named radii, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Threshold>", into = "Vec<Threshold>")]
pub struct ThresholdSet(Vec<Threshold>);

impl ThresholdSet {
    pub fn new(thresholds: Vec<Threshold>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("no thresholds".into()));
        }
        for t in &thresholds {
            if !(t.radius_km >= 0.0) || !t.radius_km.is_finite() {
                return Err(Error::Config(format!("bad radius {} for {}", t.radius_km, t.name)));
            }
        }
        if thresholds.windows(2).any(|w| w[0].radius_km >= w[1].radius_km) {
            return Err(Error::Config("threshold radii must be strictly increasing".into()));
        }
        Ok(ThresholdSet(thresholds))
    }

    /// Radii given as `name=km` pairs or bare numbers.
    pub fn parse(spec: &str) -> Result<Self> {
        let items = spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (name, km) = match item.split_once('=') {
                    Some((n, k)) => (n.trim().to_string(), k.trim()),
                    None => (format!("{item}km"), item),
                };
                km.parse::<f64>()
                    .map(|radius_km| Threshold { name, radius_km })
                    .map_err(|e| Error::Config(format!("threshold {item:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ThresholdSet::new(items)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Threshold> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.0.iter().map(|t| t.radius_km).collect()
    }
}

impl Default for ThresholdSet {
    /// Street, city, region, country and continent.
    fn default() -> Self {
        let t = |name: &str, radius_km| Threshold { name: name.into(), radius_km };
        ThresholdSet(vec![
            t("street", 1.0),
            t("city", 25.0),
            t("region", 200.0),
            t("country", 750.0),
            t("continent", 2500.0),
        ])
    }
}

impl TryFrom<Vec<Threshold>> for ThresholdSet {
    type Error = Error;

    fn try_from(v: Vec<Threshold>) -> Result<Self> {
        ThresholdSet::new(v)
    }
}

impl From<ThresholdSet> for Vec<Threshold> {
    fn from(t: ThresholdSet) -> Self {
        t.0
    }
}

/// Distance from the predicted cell's center to the true location.
pub fn localization_error_km(class: usize, truth: &GeoPoint, partition: &Partition) -> Result<f64> {
    let center = partition
        .center(class)
        .ok_or(Error::LabelOutOfRange { label: class, n_classes: partition.len() })?;
    Ok(center.distance_km(truth))
}

/// Fraction of errors `≤` each radius. Empty input gives zeros.
pub fn threshold_accuracy(errors_km: &[f64], thresholds: &ThresholdSet) -> Vec<f64> {
    if errors_km.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    thresholds
        .iter()
        .map(|t| errors_km.iter().filter(|&&e| e <= t.radius_km).count() as f64 / errors_km.len() as f64)
        .collect()
}

/// Per-photo minimum error over the `k` most confident cells.
pub fn topk_errors(dists: &[CellDistribution], truths: &[GeoPoint], partition: &Partition, k: usize) -> Result<Vec<f64>> {
    if dists.len() != truths.len() {
        return Err(Error::DimensionMismatch { expected: dists.len(), got: truths.len() });
    }
    dists
        .par_iter()
        .zip(truths)
        .map(|(d, truth)| {
            d.top_k(k)?.into_iter().try_fold(f64::INFINITY, |best, (class, _)| {
                Ok(best.min(localization_error_km(class, truth, partition)?))
            })
        })
        .collect()
}

/// Accuracy table indexed `[k][radius]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkCurve {
    pub ks: Vec<usize>,
    pub thresholds: ThresholdSet,
    pub accuracy: Vec<Vec<f64>>,
}

impl TopkCurve {
    /// Accuracy for `k` at threshold index `t`.
    pub fn get(&self, k: usize, t: usize) -> Option<f64> {
        let row = self.ks.iter().position(|&x| x == k)?;
        self.accuracy.get(row)?.get(t).copied()
    }

    /// True when every row is non-decreasing in radius and every column in `k`.
    pub fn is_nested(&self) -> bool {
        let by_radius = self.accuracy.iter().all(|row| row.windows(2).all(|w| w[0] <= w[1]));
        let by_k = self.accuracy.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        by_radius && by_k
    }
}

pub fn topk_curve(
    dists: &[CellDistribution],
    truths: &[GeoPoint],
    partition: &Partition,
    ks: &[usize],
    thresholds: &ThresholdSet,
) -> Result<TopkCurve> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let accuracy = ks
        .iter()
        .map(|&k| Ok(threshold_accuracy(&topk_errors(dists, truths, partition, k)?, thresholds)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TopkCurve { ks, thresholds: thresholds.clone(), accuracy })
}

/// Top-k curve of a single-image model over `records`.
pub fn topk_accuracy(
    model: &Classifier,
    records: &[PhotoRecord],
    partition: &Partition,
    ks: &[usize],
    thresholds: &ThresholdSet,
) -> Result<TopkCurve> {
    let dists = predict_all(model, records)?;
    let truths: Vec<GeoPoint> = records.iter().map(|r| r.geo).collect();
    topk_curve(&dists, &truths, partition, ks, thresholds)
}

pub fn predict_all(model: &Classifier, records: &[PhotoRecord]) -> Result<Vec<CellDistribution>> {
    records.par_iter().map(|r| model.predict(&r.features)).collect()
}

/// Median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn median_error_by_group<S: AsRef<str>>(errors_km: &[f64], groups: &[S]) -> Result<BTreeMap<String, f64>> {
    if errors_km.len() != groups.len() {
        return Err(Error::DimensionMismatch { expected: errors_km.len(), got: groups.len() });
    }
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (e, g) in errors_km.iter().zip(groups) {
        by.entry(g.as_ref().to_string()).or_default().push(*e);
    }
    Ok(by.into_iter().map(|(g, v)| (g, median(&v).expect("non-empty group"))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub id: String,
    pub vector: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Average precision of one query against a ranked corpus.
pub fn average_precision(query: &[f64], corpus: &[Embedded], relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Config("query has no relevant items".into()));
    }
    if let Some(missing) = relevant.iter().find(|id| !corpus.iter().any(|c| &c.id == *id)) {
        return Err(Error::Config(format!("relevant id {missing:?} not in corpus")));
    }
    let mut ranked: Vec<(f64, &str)> = corpus
        .iter()
        .map(|c| {
            if c.vector.len() != query.len() {
                Err(Error::DimensionMismatch { expected: query.len(), got: c.vector.len() })
            } else {
                Ok((squared_distance(query, &c.vector), c.id.as_str()))
            }
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, (_, id)) in ranked.iter().enumerate() {
        if relevant.contains(*id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Mean average precision, corpus ranked by Euclidean distance with ties by id.
pub fn retrieval_map(queries: &[Embedded], corpus: &[Embedded], relevance: &[BTreeSet<String>]) -> Result<f64> {
    if queries.len() != relevance.len() {
        return Err(Error::DimensionMismatch { expected: queries.len(), got: relevance.len() });
    }
    if queries.is_empty() {
        return Err(Error::Config("no queries".into()));
    }
    let aps = queries
        .iter()
        .zip(relevance)
        .map(|(q, rel)| average_precision(&q.vector, corpus, rel))
        .collect::<Result<Vec<_>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub const UNLABELED_GROUP: &str = "unlabeled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_photos: usize,
    pub median_error_km: f64,
    /// Top-1 accuracy per threshold name.
    pub accuracy: BTreeMap<String, f64>,
    pub topk: TopkCurve,
    pub median_error_by_category: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_distributions(
        dists: &[CellDistribution],
        records: &[PhotoRecord],
        partition: &Partition,
        ks: &[usize],
        thresholds: &ThresholdSet,
        config: serde_json::Value,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let truths: Vec<GeoPoint> = records.iter().map(|r| r.geo).collect();
        let mut ks = ks.to_vec();
        if !ks.contains(&1) {
            ks.push(1);
        }
        let topk = topk_curve(dists, &truths, partition, &ks, thresholds)?;
        let errors = topk_errors(dists, &truths, partition, 1)?;
        let groups: Vec<&str> = records.iter().map(|r| r.category.as_deref().unwrap_or(UNLABELED_GROUP)).collect();
        let accuracy = thresholds
            .iter()
            .zip(&topk.accuracy[0])
            .map(|(t, &a)| (t.name.clone(), a))
            .collect();
        Ok(EvalReport {
            n_photos: records.len(),
            median_error_km: median(&errors).expect("non-empty"),
            accuracy,
            median_error_by_category: median_error_by_group(&errors, &groups)?,
            topk,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format table with columns `k,threshold,radius_km,accuracy`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("k,threshold,radius_km,accuracy\n");
        for (k, row) in self.topk.ks.iter().zip(&self.topk.accuracy) {
            for (t, a) in self.topk.thresholds.iter().zip(row) {
                writeln!(out, "{k},{},{},{a}", t.name, t.radius_km).expect("write to string");
            }
        }
        out
    }

    /// Writes `report.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("curves.csv"), self.curves_csv())?;
        Ok(())
    }
}

/// Evaluates a single-image model on every record.
pub fn evaluate(
    model: &Classifier,
    records: &[PhotoRecord],
    partition: &Partition,
    ks: &[usize],
    thresholds: &ThresholdSet,
    config: serde_json::Value,
) -> Result<EvalReport> {
    model.ensure_partition(partition)?;
    let dists = predict_all(model, records)?;
    EvalReport::from_distributions(&dists, records, partition, ks, thresholds, config)
}

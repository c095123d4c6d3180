//! Geotagged photo records: JSONL I/O, album grouping, album-granular
//! splitting, near-duplicate filtering and a synthetic corpus generator.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::sphere::GeoPoint;

pub const DEFAULT_SIGNATURE_BITS: usize = 64;
pub const DEFAULT_HAMMING_THRESHOLD: u32 = 8;

/// Fixed-width binary embedding used for near-duplicate detection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature(Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Signature(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        hex::decode(s).map(Signature).map_err(|e| Error::Signature(format!("{s:?}: {e}")))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn bits(&self) -> usize {
        self.0.len() * 8
    }

    pub fn hamming(&self, other: &Signature) -> Result<u32> {
        if self.0.len() != other.0.len() {
            return Err(Error::Signature(format!(
                "width mismatch: {} vs {} bits",
                self.bits(),
                other.bits()
            )));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoRecord {
    pub id: String,
    pub geo: GeoPoint,
    pub features: Vec<f64>,
    pub timestamp: Option<i64>,
    pub album_id: Option<String>,
    pub signature: Option<Signature>,
    pub category: Option<String>,
}

impl PhotoRecord {
    pub fn new(id: impl Into<String>, geo: GeoPoint, features: Vec<f64>) -> Self {
        PhotoRecord {
            id: id.into(),
            geo,
            features,
            timestamp: None,
            album_id: None,
            signature: None,
            category: None,
        }
    }
}

/// On-disk line layout.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    lat: f64,
    lon: f64,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ts: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    album: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sig: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

impl RecordLine {
    fn from_record(r: &PhotoRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            lat: r.geo.lat,
            lon: r.geo.lon,
            features: r.features.clone(),
            ts: r.timestamp,
            album: r.album_id.clone(),
            sig: r.signature.as_ref().map(Signature::to_hex),
            category: r.category.clone(),
        }
    }

    fn into_record(self) -> Result<PhotoRecord> {
        if self.album.is_some() && self.ts.is_none() {
            return Err(Error::Config(format!("album member {:?} has no timestamp", self.id)));
        }
        if let Some(x) = self.features.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature {x}")));
        }
        Ok(PhotoRecord {
            geo: GeoPoint::new(self.lat, self.lon)?,
            signature: self.sig.as_deref().map(Signature::from_hex).transpose()?,
            id: self.id,
            features: self.features,
            timestamp: self.ts,
            album_id: self.album,
            category: self.category,
        })
    }
}

/// An ordered collection of records with a uniform feature dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<PhotoRecord>,
}

/// Photos sharing an album id, in chronological order (ties broken by id).
#[derive(Debug, Clone, PartialEq)]
pub struct Album {
    pub album_id: String,
    pub photos: Vec<PhotoRecord>,
}

impl Dataset {
    pub fn new(records: Vec<PhotoRecord>) -> Result<Self> {
        let ds = Dataset { records };
        ds.check_dims()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.features.len())
    }

    fn check_dims(&self) -> Result<()> {
        if let Some(d) = self.feature_dim() {
            if let Some(r) = self.records.iter().find(|r| r.features.len() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: r.features.len() });
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut dim = None;
        for (k, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = k + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            let raw: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let record = raw.into_record().map_err(|e| parse_err(e.to_string()))?;
            match dim {
                None => dim = Some(record.features.len()),
                Some(d) if d != record.features.len() => {
                    return Err(parse_err(format!(
                        "feature dimension {} differs from {d}",
                        record.features.len()
                    )))
                }
                Some(_) => {}
            }
            records.push(record);
        }
        Ok(Dataset { records })
    }

    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for r in &self.records {
            serde_json::to_writer(&mut w, &RecordLine::from_record(r))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Albums keyed by id, each sorted by `(timestamp, id)`. Records without an
    /// album id are not part of any album.
    pub fn albums(&self) -> Vec<Album> {
        let mut groups: BTreeMap<&str, Vec<PhotoRecord>> = BTreeMap::new();
        for r in &self.records {
            if let Some(a) = &r.album_id {
                groups.entry(a.as_str()).or_default().push(r.clone());
            }
        }
        groups
            .into_iter()
            .map(|(id, mut photos)| {
                photos.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
                Album { album_id: id.to_string(), photos }
            })
            .collect()
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::read_jsonl(File::open(path)?)
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.write_jsonl(File::create(path)?)
}

/// Album-granular train/validation split.
///
/// Units (albums, or single photos without an album) are shuffled with
/// `seed`; each goes to the training side when that moves the training size
/// closer to `train_fraction · n`. Both sides keep input order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut unit_of: Vec<usize> = Vec::with_capacity(dataset.len());
    let mut unit_ids: HashMap<String, usize> = HashMap::new();
    let mut sizes: Vec<usize> = Vec::new();
    for r in &dataset.records {
        let key = match &r.album_id {
            Some(a) => format!("a:{a}"),
            None => format!("p:{}", r.id),
        };
        let next = sizes.len();
        let u = *unit_ids.entry(key).or_insert(next);
        if u == next {
            sizes.push(0);
        }
        sizes[u] += 1;
        unit_of.push(u);
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut seed::rng(seed));

    let target = train_fraction * dataset.len() as f64;
    let mut in_train = vec![false; sizes.len()];
    let mut n_train = 0usize;
    for u in order {
        let with = (n_train + sizes[u]) as f64;
        if (with - target).abs() < (n_train as f64 - target).abs() {
            in_train[u] = true;
            n_train += sizes[u];
        }
    }
    let (train, val): (Vec<_>, Vec<_>) = dataset
        .records
        .iter()
        .zip(&unit_of)
        .partition(|(_, &u)| in_train[u]);
    Ok((
        Dataset { records: train.into_iter().map(|(r, _)| r.clone()).collect() },
        Dataset { records: val.into_iter().map(|(r, _)| r.clone()).collect() },
    ))
}

/// Drops test records within `hamming_threshold` bits of any training record.
/// A record survives iff its minimum distance to the training set is `>= threshold`.
pub fn dedup_filter(test: &Dataset, train: &Dataset, hamming_threshold: u32) -> Result<Dataset> {
    let sig = |r: &PhotoRecord| {
        r.signature
            .clone()
            .ok_or_else(|| Error::Signature(format!("record {:?} has no signature", r.id)))
    };
    let train_sigs: Vec<Signature> = train.records.iter().map(sig).collect::<Result<_>>()?;
    let test_sigs: Vec<Signature> = test.records.iter().map(sig).collect::<Result<_>>()?;
    let width = train_sigs.first().or(test_sigs.first()).map(Signature::bits);
    if let Some(w) = width {
        if let Some(s) = train_sigs.iter().chain(&test_sigs).find(|s| s.bits() != w) {
            return Err(Error::Signature(format!("width mismatch: {w} vs {} bits", s.bits())));
        }
    }
    let keep: Vec<bool> = test_sigs
        .par_iter()
        .map(|s| {
            train_sigs
                .iter()
                .all(|t| s.hamming(t).map(|d| d >= hamming_threshold).unwrap_or(false))
        })
        .collect();
    Ok(Dataset {
        records: test
            .records
            .iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then(|| r.clone()))
            .collect(),
    })
}

/// Parameters of the synthetic album corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_hotspots: usize,
    /// Average photos per hotspot; the corpus has `n_hotspots · photos_per_hotspot` photos.
    pub photos_per_hotspot: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Fraction of photos whose geotag is moved to a different hotspot.
    pub label_noise: f64,
    /// Fraction of photos with location-independent features.
    pub ambiguous_fraction: f64,
    /// Number of location-independent feature prototypes (food, pets, ...).
    pub n_generic: usize,
    /// Norm of every feature prototype.
    pub mean_norm: f64,
    /// Spatial spread of photos around their hotspot.
    pub spread_km: f64,
    /// Hotspots are grouped into regions of this radius.
    pub region_radius_km: f64,
    pub hotspots_per_region: usize,
    pub album_len: (usize, usize),
    pub segment_len: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_hotspots: 24,
            photos_per_hotspot: 150,
            feature_dim: 16,
            noise_sigma: 0.35,
            label_noise: 0.0,
            ambiguous_fraction: 0.5,
            n_generic: 3,
            mean_norm: 3.0,
            spread_km: 0.05,
            region_radius_km: 300.0,
            hotspots_per_region: 4,
            album_len: (6, 30),
            segment_len: (3, 12),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !frac(self.label_noise) || !frac(self.ambiguous_fraction) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.n_hotspots == 0 || self.photos_per_hotspot == 0 || self.feature_dim == 0 {
            return Err(Error::Config("hotspots, photos and feature dim must be positive".into()));
        }
        if self.ambiguous_fraction > 0.0 && self.n_generic == 0 {
            return Err(Error::Config("ambiguous photos need n_generic > 0".into()));
        }
        if self.noise_sigma < 0.0 || self.spread_km < 0.0 || self.mean_norm <= 0.0 {
            return Err(Error::Config("sigma and spread must be >= 0, mean_norm > 0".into()));
        }
        let ok_range = |(a, b): (usize, usize)| a >= 1 && a <= b;
        if !ok_range(self.album_len) || !ok_range(self.segment_len) || self.hotspots_per_region == 0 {
            return Err(Error::Config("album/segment length ranges need 1 <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hotspot {
    pub geo: GeoPoint,
    pub mean: Vec<f64>,
    /// Indices of other hotspots in the same region, nearest first.
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub hotspots: Vec<Hotspot>,
    pub generic_means: Vec<Vec<f64>>,
    /// Hotspot each photo was taken at, parallel to `dataset.records`.
    pub photo_hotspot: Vec<usize>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Point at `north_km`, `east_km` from `origin` (local flat-earth offset).
fn offset_km(origin: &GeoPoint, north_km: f64, east_km: f64) -> GeoPoint {
    const KM_PER_DEG: f64 = crate::sphere::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    let lat = (origin.lat + north_km / KM_PER_DEG).clamp(-89.9, 89.9);
    let lon = origin.lon + east_km / (KM_PER_DEG * lat.to_radians().cos());
    GeoPoint::new(lat, lon).expect("finite offset")
}

fn uniform_on_sphere(rng: &mut impl Rng, max_abs_lat: f64) -> GeoPoint {
    let z_max = max_abs_lat.to_radians().sin();
    let z: f64 = rng.random_range(-z_max..=z_max);
    let lon: f64 = rng.random_range(-180.0..180.0);
    GeoPoint::new(z.asin().to_degrees(), lon).expect("finite")
}

/// Prototype feature means, pairwise at least `6σ` apart.
fn separated_means(rng: &mut impl Rng, n: usize, spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let min_sep = 6.0 * spec.noise_sigma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tries = 0;
        loop {
            let mut m = gaussian_vec(rng, spec.feature_dim, 1.0);
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            m.iter_mut().for_each(|x| *x *= spec.mean_norm / norm);
            if means.iter().all(|o| euclid(o, &m) >= min_sep) {
                means.push(m);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Config(format!(
                    "cannot place {n} feature means {min_sep} apart in dim {}",
                    spec.feature_dim
                )));
            }
        }
    }
    Ok(means)
}

/// Synthetic geotagged albums.
///
/// Hotspots sit in regions; each has a characteristic feature mean. Albums
/// are random walks over the hotspots of one region: a run of photos at one
/// hotspot, then a move to a neighbouring hotspot. Distinctive photos get
/// `mean + N(0, σ²)`; ambiguous photos get a generic prototype plus noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);

    let all_means = separated_means(&mut rng, spec.n_hotspots + spec.n_generic, spec)?;
    let (hot_means, generic_means) = all_means.split_at(spec.n_hotspots);

    let n_regions = spec.n_hotspots.div_ceil(spec.hotspots_per_region);
    let region_centers: Vec<GeoPoint> = (0..n_regions).map(|_| uniform_on_sphere(&mut rng, 60.0)).collect();
    let mut hotspots: Vec<Hotspot> = Vec::with_capacity(spec.n_hotspots);
    let mut region_of = Vec::with_capacity(spec.n_hotspots);
    for h in 0..spec.n_hotspots {
        let region = h % n_regions;
        let center = &region_centers[region];
        // Keep hotspots well outside each other's street-level radius.
        let geo = loop {
            let r = spec.region_radius_km * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let g = offset_km(center, r * theta.cos(), r * theta.sin());
            if hotspots.iter().all(|o| o.geo.distance_km(&g) > 10.0) {
                break g;
            }
        };
        hotspots.push(Hotspot { geo, mean: hot_means[h].clone(), neighbors: Vec::new() });
        region_of.push(region);
    }
    for h in 0..spec.n_hotspots {
        let mut nb: Vec<usize> = (0..spec.n_hotspots)
            .filter(|&o| o != h && region_of[o] == region_of[h])
            .collect();
        nb.sort_by(|&a, &b| {
            let da = hotspots[h].geo.distance_km(&hotspots[a].geo);
            let db = hotspots[h].geo.distance_km(&hotspots[b].geo);
            da.total_cmp(&db)
        });
        hotspots[h].neighbors = nb;
    }

    let total = spec.n_hotspots * spec.photos_per_hotspot;
    let mut records = Vec::with_capacity(total);
    let mut photo_hotspot = Vec::with_capacity(total);
    let mut album_idx = 0usize;
    while records.len() < total {
        let len = rng.random_range(spec.album_len.0..=spec.album_len.1).min(total - records.len());
        let album_id = format!("a{album_idx:05}");
        let base_ts = 1_400_000_000i64 + 86_400 * album_idx as i64;
        let mut here = rng.random_range(0..spec.n_hotspots);
        let mut left_in_segment = rng.random_range(spec.segment_len.0..=spec.segment_len.1);
        for k in 0..len {
            if left_in_segment == 0 {
                if !hotspots[here].neighbors.is_empty() {
                    let nb = &hotspots[here].neighbors;
                    here = nb[rng.random_range(0..nb.len().min(3))];
                }
                left_in_segment = rng.random_range(spec.segment_len.0..=spec.segment_len.1);
            }
            left_in_segment -= 1;

            let ambiguous = rng.random::<f64>() < spec.ambiguous_fraction;
            let noise = gaussian_vec(&mut rng, spec.feature_dim, spec.noise_sigma);
            let (proto, category) = if ambiguous {
                (&generic_means[rng.random_range(0..generic_means.len())], "ambiguous")
            } else {
                (&hotspots[here].mean, "distinctive")
            };
            let features: Vec<f64> = proto.iter().zip(&noise).map(|(m, e)| m + e).collect();

            let mut tagged_at = here;
            if rng.random::<f64>() < spec.label_noise && spec.n_hotspots > 1 {
                let other = rng.random_range(0..spec.n_hotspots - 1);
                tagged_at = if other >= here { other + 1 } else { other };
            }
            let (dn, de): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let geo = offset_km(&hotspots[tagged_at].geo, dn * spec.spread_km, de * spec.spread_km);

            let mut sig = vec![0u8; DEFAULT_SIGNATURE_BITS / 8];
            rng.fill(&mut sig[..]);

            records.push(PhotoRecord {
                id: format!("{album_id}-p{k:03}"),
                geo,
                features,
                timestamp: Some(base_ts + 60 * k as i64),
                album_id: Some(album_id.clone()),
                signature: Some(Signature::from_bytes(sig)),
                category: Some(category.to_string()),
            });
            photo_hotspot.push(tagged_at);
        }
        album_idx += 1;
    }

    Ok(SyntheticData {
        dataset: Dataset { records },
        hotspots,
        generic_means: generic_means.to_vec(),
        photo_hotspot,
    })
}

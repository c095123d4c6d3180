//! Adaptive geocell partitioning.
//!
//! Cells are subdivided from the six face roots until none holds more than
//! `t1` photos (or `max_level` is reached). Leaves with fewer than `t2`
//! photos are then dropped in a single pass; their territory is uncovered.
//! Class indices are positions in the token-sorted cell list.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::PhotoRecord;
use crate::error::{Error, Result};
use crate::sphere::{face_st, latlon_to_unit, CellId, GeoPoint, MAX_LEVEL, NUM_FACES};

pub const PARTITION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    /// Maximum photos per cell before it is subdivided.
    pub t1: u64,
    /// Minimum photos for a cell to be kept.
    pub t2: u64,
    pub max_level: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams { t1: 10_000, t2: 50, max_level: MAX_LEVEL }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if self.t2 == 0 || self.t1 == 0 || self.t2 > self.t1 {
            return Err(Error::Config(format!(
                "partition thresholds need 0 < t2 <= t1, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if self.max_level > MAX_LEVEL {
            return Err(Error::InvalidLevel { level: self.max_level, max: MAX_LEVEL });
        }
        Ok(())
    }
}

/// A frozen class space: token-sorted leaf cells and their build-time counts.
#[derive(Debug, Clone)]
pub struct Partition {
    cells: Vec<CellId>,
    counts: Vec<u64>,
    params: PartitionParams,
    index: HashMap<CellId, usize>,
    levels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    params: PartitionParams,
    cells: Vec<CellId>,
    counts: Vec<u64>,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub n_cells: usize,
    pub min_level: usize,
    pub max_level: usize,
    pub total_count: u64,
    /// `(lower bound, upper bound exclusive, cells)` over power-of-two count buckets.
    pub count_histogram: Vec<(u64, u64, usize)>,
}

/// A photo with its class index in some partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPhoto {
    pub record: PhotoRecord,
    pub class: usize,
}

/// Z-order key of a point's cell at `level`: face in the top bits, then the
/// path digits, most significant first.
fn leaf_key(p: &GeoPoint, level: usize) -> Result<u64> {
    let (face, s, t) = face_st(&latlon_to_unit(*p)?);
    let n = 1u64 << level;
    let i = ((s * n as f64).floor() as u64).min(n - 1);
    let j = ((t * n as f64).floor() as u64).min(n - 1);
    Ok((u64::from(face) << 60) | interleave(i, j, level))
}

fn interleave(i: u64, j: u64, level: usize) -> u64 {
    let mut key = 0u64;
    for b in (0..level).rev() {
        key = (key << 2) | (((i >> b) & 1) << 1) | ((j >> b) & 1);
    }
    key
}

fn digit_at(key: u64, depth: usize, max_level: usize) -> u8 {
    ((key >> (2 * (max_level - 1 - depth))) & 3) as u8
}

/// Recursive descent over the sorted `(key, count)` slice of one cell.
fn descend(cell: CellId, keys: &[(u64, u64)], params: &PartitionParams, out: &mut Vec<(CellId, u64)>) {
    let count: u64 = keys.iter().map(|&(_, c)| c).sum();
    if count == 0 {
        return;
    }
    if count <= params.t1 || cell.level() >= params.max_level {
        out.push((cell, count));
        return;
    }
    let depth = cell.level();
    let mut start = 0;
    while start < keys.len() {
        let d = digit_at(keys[start].0, depth, params.max_level);
        let end = start + keys[start..].partition_point(|&(k, _)| digit_at(k, depth, params.max_level) == d);
        let child = cell.child(d).expect("below max_level");
        descend(child, &keys[start..end], params, out);
        start = end;
    }
}

/// Builds the adaptive partition from a stream of geotags.
///
/// The stream is consumed once into per-`max_level`-cell counts, so memory is
/// proportional to the number of distinct occupied cells.
pub fn build_partition<I>(points: I, params: PartitionParams) -> Result<Partition>
where
    I: IntoIterator<Item = GeoPoint>,
{
    params.validate()?;
    let mut leaf_counts: HashMap<u64, u64> = HashMap::new();
    for p in points {
        *leaf_counts.entry(leaf_key(&p, params.max_level)?).or_default() += 1;
    }
    if leaf_counts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut keys: Vec<(u64, u64)> = leaf_counts.into_iter().collect();
    keys.sort_unstable();

    let mut leaves: Vec<(CellId, u64)> = (0..NUM_FACES)
        .into_par_iter()
        .map(|face| {
            let lo = keys.partition_point(|&(k, _)| (k >> 60) < u64::from(face));
            let hi = keys.partition_point(|&(k, _)| (k >> 60) <= u64::from(face));
            let mut out = Vec::new();
            descend(CellId::from_face(face).expect("valid face"), &keys[lo..hi], &params, &mut out);
            out
        })
        .flatten()
        .collect();

    leaves.retain(|&(_, c)| c >= params.t2);
    if leaves.is_empty() {
        return Err(Error::DegeneratePartition(format!(
            "every cell holds fewer than t2={} photos",
            params.t2
        )));
    }
    leaves.sort_by(|a, b| a.0.cmp(&b.0));
    let (cells, counts) = leaves.into_iter().unzip();
    Partition::from_parts(cells, counts, params)
}

impl Partition {
    /// Assembles a partition and checks every structural invariant.
    pub fn from_parts(cells: Vec<CellId>, counts: Vec<u64>, params: PartitionParams) -> Result<Self> {
        params.validate()?;
        let bad = |m: String| Err(Error::InvalidPartition(m));
        if cells.is_empty() {
            return Err(Error::DegeneratePartition("no cells".into()));
        }
        if cells.len() != counts.len() {
            return bad(format!("{} cells but {} counts", cells.len(), counts.len()));
        }
        for (k, (c, &n)) in cells.iter().zip(&counts).enumerate() {
            if c.level() > params.max_level {
                return bad(format!("cell {c} deeper than max_level {}", params.max_level));
            }
            if n < params.t2 {
                return bad(format!("cell {c} has {n} < t2={} photos", params.t2));
            }
            if n > params.t1 && c.level() < params.max_level {
                return bad(format!("cell {c} has {n} > t1={} photos below max_level", params.t1));
            }
            if k > 0 {
                let prev = &cells[k - 1];
                if prev >= c {
                    return bad(format!("cells not strictly token-sorted at {prev}, {c}"));
                }
                // In token order an ancestor is directly followed by its descendants.
                if prev.is_ancestor_of(c) {
                    return bad(format!("cell {prev} is an ancestor of {c}"));
                }
            }
        }
        let index = cells.iter().enumerate().map(|(k, c)| (*c, k)).collect();
        let mut levels: Vec<usize> = cells.iter().map(|c| c.level()).collect();
        levels.sort_unstable();
        levels.dedup();
        Ok(Partition { cells, counts, params, index, levels })
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn params(&self) -> &PartitionParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn version(&self) -> u32 {
        PARTITION_FORMAT_VERSION
    }

    pub fn cell(&self, class: usize) -> Option<&CellId> {
        self.cells.get(class)
    }

    pub fn index_of(&self, cell: &CellId) -> Option<usize> {
        self.index.get(cell).copied()
    }

    pub fn center(&self, class: usize) -> Option<GeoPoint> {
        self.cells.get(class).map(|c| c.center())
    }

    /// Content hash of params and cell list; checkpoints record it.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "v{} t1={} t2={} max={}\n",
            PARTITION_FORMAT_VERSION, self.params.t1, self.params.t2, self.params.max_level
        ));
        for c in &self.cells {
            h.update(c.token().as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Index of the unique kept cell containing `p`, or `None` for uncovered territory.
    pub fn class_of(&self, p: &GeoPoint) -> Option<usize> {
        let deepest = *self.levels.last()?;
        let leaf = CellId::from_point(p, deepest).ok()?;
        self.levels
            .iter()
            .find_map(|&l| leaf.ancestor(l).and_then(|c| self.index.get(&c).copied()))
    }

    pub fn stats(&self) -> PartitionStats {
        let mut buckets: Vec<(u64, u64, usize)> = Vec::new();
        for &n in &self.counts {
            let lo = if n == 0 { 0 } else { 1u64 << (63 - n.leading_zeros()) };
            let hi = lo.max(1) * 2;
            match buckets.iter_mut().find(|b| b.0 == lo) {
                Some(b) => b.2 += 1,
                None => buckets.push((lo, hi, 1)),
            }
        }
        buckets.sort_unstable();
        PartitionStats {
            n_cells: self.cells.len(),
            min_level: self.levels.first().copied().unwrap_or(0),
            max_level: self.levels.last().copied().unwrap_or(0),
            total_count: self.counts.iter().sum(),
            count_histogram: buckets,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PartitionFile {
            params: self.params,
            cells: self.cells.clone(),
            counts: self.counts.clone(),
            version: PARTITION_FORMAT_VERSION,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PartitionFile = serde_json::from_str(text)?;
        if file.version != PARTITION_FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "partition file version {} (expected {PARTITION_FORMAT_VERSION})",
                file.version
            )));
        }
        Partition::from_parts(file.cells, file.counts, file.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Partition::from_json(&fs::read_to_string(path)?)
    }
}

/// Keeps photos inside kept cells, in input order, attaching their class.
pub fn filter_covered<'a, I>(photos: I, part: &'a Partition) -> impl Iterator<Item = LabeledPhoto> + 'a
where
    I: IntoIterator<Item = PhotoRecord>,
    I::IntoIter: 'a,
{
    photos
        .into_iter()
        .filter_map(move |record| part.class_of(&record.geo).map(|class| LabeledPhoto { record, class }))
}

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use geocell::dataset::{write_jsonl, Dataset, PhotoRecord};
use geocell::partition::PartitionParams;
use geocell::sphere::{CellId, GeoPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn geocell(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geocell")).args(args).output().expect("binary runs")
}

pub fn geocell_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geocell"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr:\n{}", stderr(o));
}

/// Points scattered around three city hotspots with different spreads.
pub fn hotspot_points(seed: u64, n: usize) -> Vec<GeoPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: [(f64, f64, f64); 3] = [(48.85, 2.35, 0.5), (40.71, -74.0, 2.0), (-33.87, 151.2, 0.1)];
    (0..n)
        .map(|_| {
            let (lat, lon, sd) = centers[rng.random_range(0..centers.len())];
            let nd = Normal::new(0.0, sd).unwrap();
            GeoPoint::new((lat + nd.sample(&mut rng)).clamp(-90.0, 90.0), lon + nd.sample(&mut rng)).unwrap()
        })
        .collect()
}

pub fn write_points(path: &Path, points: &[GeoPoint]) {
    let records = points
        .iter()
        .enumerate()
        .map(|(i, g)| PhotoRecord::new(format!("pt{i}"), *g, vec![0.0]))
        .collect();
    write_jsonl(&Dataset { records }, path).unwrap();
}

/// Top-down partitioner over explicit point lists, sorted tokens out.
pub fn brute_force_tokens(points: &[GeoPoint], params: PartitionParams) -> Vec<String> {
    fn go(cell: CellId, pts: Vec<&GeoPoint>, p: &PartitionParams, out: &mut Vec<String>) {
        if pts.len() as u64 > p.t1 && cell.level() < p.max_level {
            for child in cell.children().unwrap() {
                let inside: Vec<&GeoPoint> = pts.iter().copied().filter(|q| child.contains(q)).collect();
                if !inside.is_empty() {
                    go(child, inside, p, out);
                }
            }
        } else if pts.len() as u64 >= p.t2 {
            out.push(cell.token());
        }
    }
    let mut out = Vec::new();
    for f in 0..6 {
        let face = CellId::from_face(f).unwrap();
        let pts: Vec<&GeoPoint> = points.iter().filter(|q| face.contains(q)).collect();
        if !pts.is_empty() {
            go(face, pts, &params, &mut out);
        }
    }
    out.sort();
    out
}

pub fn partition_tokens(path: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["cells"].as_array().unwrap().iter().map(|t| t.as_str().unwrap().to_string()).collect()
}

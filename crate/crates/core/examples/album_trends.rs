//! Runs the synthetic album benchmark and prints the trend report as JSON.
//!
//! Usage: `cargo run --release --example album_trends [n_seeds]`

use geocell::bench::{trend_report, BenchConfig};

fn main() -> geocell::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seeds: Vec<u64> = (0..n).collect();
    let start = std::time::Instant::now();
    let report = trend_report(&BenchConfig::default(), &seeds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("elapsed: {:.1?}", start.elapsed());
    Ok(())
}

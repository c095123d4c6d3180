use std::collections::{BTreeMap, HashSet};

use geocell::dataset::{
    dedup_filter, generate_synthetic, load_jsonl, split, write_jsonl, Dataset, PhotoRecord, Signature,
    SyntheticSpec,
};
use geocell::sphere::GeoPoint;
use geocell::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(seed: u64, n: usize, albums: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let geo = GeoPoint::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0)).unwrap();
            let features = (0..4).map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut r = PhotoRecord::new(format!("r{i:04}"), geo, features);
            if albums > 0 && rng.random_bool(0.8) {
                r.album_id = Some(format!("alb{}", rng.random_range(0..albums)));
                r.timestamp = Some(1_000_000 + i as i64);
            }
            if rng.random_bool(0.5) {
                r.category = Some(["a", "b"][i % 2].to_string());
            }
            r.signature = Some(Signature::from_bytes(rng.random::<[u8; 8]>().to_vec()));
            r
        })
        .collect();
    Dataset { records }
}

fn bytes_of(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    ds.write_jsonl(&mut out).unwrap();
    out
}

fn ids(ds: &Dataset) -> Vec<String> {
    ds.records.iter().map(|r| r.id.clone()).collect()
}

#[test]
fn empty_file_loads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(load_jsonl(&path).unwrap().records.is_empty());
}

#[test]
fn single_record_round_trips_exactly() {
    let mut r = PhotoRecord::new("only", GeoPoint::new(-12.345678901234, 98.7654321).unwrap(), vec![0.1, -2.5e-7, 3.0]);
    r.timestamp = Some(1_234_567_890);
    r.album_id = Some("trip".into());
    r.signature = Some(Signature::from_hex("00ff10a5deadbeef").unwrap());
    r.category = Some("beach".into());
    let ds = Dataset { records: vec![r] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    write_jsonl(&ds, &path).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), ds);
}

#[test]
fn thousand_records_write_load_write_is_byte_identical() {
    let ds = random_dataset(1, 1000, 40);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    write_jsonl(&ds, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(bytes_of(&back), first);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let good = r#"{"id":"a","lat":1,"lon":2,"features":[1,2]}"#;
    let cases = [
        (format!("{good}\n{good}\nnot json\n"), 3),
        (format!("{good}\n{{\"id\":\"b\",\"lat\":91,\"lon\":0,\"features\":[1,2]}}\n"), 2),
        (format!("{good}\n\n{{\"id\":\"c\",\"lat\":1,\"lon\":2,\"features\":[1]}}\n"), 3),
    ];
    for (text, line_no) in cases {
        match Dataset::read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, line_no, "{text}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

#[test]
fn albums_come_out_chronological() {
    let mut recs = Vec::new();
    for (id, ts) in [("c", 30), ("a", 10), ("b", 20), ("d", 20)] {
        let mut r = PhotoRecord::new(id, GeoPoint::new(0.0, 0.0).unwrap(), vec![0.0]);
        r.album_id = Some("x".into());
        r.timestamp = Some(ts);
        recs.push(r);
    }
    recs.push(PhotoRecord::new("loose", GeoPoint::new(0.0, 0.0).unwrap(), vec![0.0]));
    let albums = Dataset { records: recs }.albums();
    assert_eq!(albums.len(), 1);
    let order: Vec<&str> = albums[0].photos.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(order, ["a", "b", "d", "c"]);
}

#[test]
fn half_split_of_two_albums() {
    let mut recs = Vec::new();
    for (a, n) in [("x", 4), ("y", 4)] {
        for k in 0..n {
            let mut r = PhotoRecord::new(format!("{a}{k}"), GeoPoint::new(0.0, 0.0).unwrap(), vec![]);
            r.album_id = Some(a.into());
            r.timestamp = Some(k);
            recs.push(r);
        }
    }
    let ds = Dataset { records: recs };
    for seed in 0..10 {
        let (tr, va) = split(&ds, 0.5, seed).unwrap();
        let albums = |d: &Dataset| d.records.iter().map(|r| r.album_id.clone().unwrap()).collect::<HashSet<_>>();
        assert_eq!(albums(&tr).len(), 1);
        assert_eq!(albums(&va).len(), 1);
        assert_ne!(albums(&tr), albums(&va));
    }
}

#[test]
fn split_hits_target_within_one_album() {
    let ds = random_dataset(2, 1000, 60);
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    for r in &ds.records {
        if let Some(a) = &r.album_id {
            *sizes.entry(a.clone()).or_default() += 1;
        }
    }
    let largest = sizes.values().copied().max().unwrap();
    for seed in 0..5 {
        let (tr, va) = split(&ds, 0.728, seed).unwrap();
        assert_eq!(tr.records.len() + va.records.len(), 1000);
        let target = 0.728 * 1000.0;
        assert!((tr.records.len() as f64 - target).abs() <= largest as f64, "{}", tr.records.len());
    }
}

#[test]
fn split_rejects_bad_fraction() {
    let ds = random_dataset(3, 10, 0);
    for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
        assert!(split(&ds, f, 0).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_disjoint_deterministic_and_album_pure(
        seed in 0u64..1000,
        n in 1usize..300,
        albums in 0usize..30,
        frac in 0.05f64..0.95,
    ) {
        let ds = random_dataset(seed, n, albums);
        let (tr, va) = split(&ds, frac, seed).unwrap();
        let (tr2, va2) = split(&ds, frac, seed).unwrap();
        prop_assert_eq!(&tr, &tr2);
        prop_assert_eq!(&va, &va2);
        let a: HashSet<String> = ids(&tr).into_iter().collect();
        let b: HashSet<String> = ids(&va).into_iter().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
        let train_albums: HashSet<String> = tr.records.iter().filter_map(|r| r.album_id.clone()).collect();
        for r in &va.records {
            if let Some(al) = &r.album_id {
                prop_assert!(!train_albums.contains(al));
            }
        }
    }
}

fn sig_dataset(rng: &mut ChaCha8Rng, prefix: &str, n: usize) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let mut r = PhotoRecord::new(format!("{prefix}{i}"), GeoPoint::new(0.0, 0.0).unwrap(), vec![1.0]);
            r.signature = Some(Signature::from_bytes(rng.random::<u64>().to_be_bytes().to_vec()));
            r
        })
        .collect();
    Dataset { records }
}

fn popcount_distance(a: &Signature, b: &Signature) -> u32 {
    let x = u64::from_str_radix(&a.to_hex(), 16).unwrap();
    let y = u64::from_str_radix(&b.to_hex(), 16).unwrap();
    (x ^ y).count_ones()
}

#[test]
fn dedup_threshold_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = sig_dataset(&mut rng, "tr", 50);
    let mut test = sig_dataset(&mut rng, "te", 50);
    test.records[3].signature = train.records[7].signature.clone();
    assert_eq!(dedup_filter(&test, &train, 0).unwrap(), test);
}

#[test]
fn exact_duplicate_removed_at_any_positive_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = sig_dataset(&mut rng, "tr", 20);
    let mut test = sig_dataset(&mut rng, "te", 20);
    test.records[11].signature = train.records[2].signature.clone();
    for t in [1, 2, 8, 64] {
        let kept = dedup_filter(&test, &train, t).unwrap();
        assert!(!ids(&kept).contains(&"te11".to_string()), "threshold {t}");
    }
}

#[test]
fn dedup_matches_quadratic_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = sig_dataset(&mut rng, "tr", 200);
    let test = sig_dataset(&mut rng, "te", 200);
    // Random 64-bit pairs sit near 32 bits apart, so sweep across the bulk.
    for t in [0, 16, 20, 22, 24, 26, 64] {
        let oracle: Vec<String> = test
            .records
            .iter()
            .filter(|r| {
                let s = r.signature.as_ref().unwrap();
                train.records.iter().map(|q| popcount_distance(s, q.signature.as_ref().unwrap())).min().unwrap() >= t
            })
            .map(|r| r.id.clone())
            .collect();
        let kept = dedup_filter(&test, &train, t).unwrap();
        assert_eq!(ids(&kept), oracle, "threshold {t}");
        assert_eq!(dedup_filter(&kept, &train, t).unwrap(), kept);
    }
}

#[test]
fn dedup_signature_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = sig_dataset(&mut rng, "tr", 5);
    let mut missing = sig_dataset(&mut rng, "te", 5);
    missing.records[2].signature = None;
    assert!(matches!(dedup_filter(&missing, &train, 8), Err(Error::Signature(_))));
    let mut narrow = sig_dataset(&mut rng, "te", 5);
    narrow.records[0].signature = Some(Signature::from_hex("abcd").unwrap());
    assert!(matches!(dedup_filter(&narrow, &train, 8), Err(Error::Signature(_))));
}

#[test]
fn split_then_dedup_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train = sig_dataset(&mut rng, "tr", 100);
    let mut pool = sig_dataset(&mut rng, "te", 300);
    for k in [0, 40, 80, 120] {
        pool.records[k].signature = train.records[k / 2].signature.clone();
    }
    let (a, b) = split(&pool, 0.6, 1).unwrap();
    let deduped = dedup_filter(&pool, &train, 8).unwrap();
    let (da, db) = split(&deduped, 0.6, 1).unwrap();
    let da_ids: HashSet<String> = ids(&da).into_iter().collect();
    let db_ids: HashSet<String> = ids(&db).into_iter().collect();
    let fa: HashSet<String> = ids(&dedup_filter(&a, &train, 8).unwrap()).into_iter().collect();
    let fb: HashSet<String> = ids(&dedup_filter(&b, &train, 8).unwrap()).into_iter().collect();
    assert_eq!(fa.union(&fb).cloned().collect::<HashSet<_>>(), da_ids.union(&db_ids).cloned().collect());
    assert_eq!(fa.len() + fb.len(), deduped.records.len());
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { n_hotspots: 8, photos_per_hotspot: 60, seed, ..SyntheticSpec::default() }
}

#[test]
fn zero_noise_features_equal_hotspot_means() {
    let spec = SyntheticSpec { noise_sigma: 0.0, ambiguous_fraction: 0.0, ..small_spec(9) };
    let data = generate_synthetic(&spec).unwrap();
    assert_eq!(data.dataset.records.len(), 8 * 60);
    for (r, &h) in data.dataset.records.iter().zip(&data.photo_hotspot) {
        assert_eq!(r.features, data.hotspots[h].mean);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = generate_synthetic(&small_spec(10)).unwrap();
    let b = generate_synthetic(&small_spec(10)).unwrap();
    let c = generate_synthetic(&small_spec(11)).unwrap();
    assert_eq!(bytes_of(&a.dataset), bytes_of(&b.dataset));
    assert_ne!(bytes_of(&a.dataset), bytes_of(&c.dataset));
}

#[test]
fn synthetic_structure_holds() {
    let spec = small_spec(12);
    let data = generate_synthetic(&spec).unwrap();
    let means: Vec<&Vec<f64>> = data.hotspots.iter().map(|h| &h.mean).chain(&data.generic_means).collect();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i].iter().zip(means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d >= 6.0 * spec.noise_sigma, "means {i},{j} only {d} apart");
        }
    }
    for album in data.dataset.albums() {
        let ts: Vec<i64> = album.photos.iter().map(|p| p.timestamp.unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }
    for (r, &h) in data.dataset.records.iter().zip(&data.photo_hotspot) {
        assert!(r.geo.distance_km(&data.hotspots[h].geo) < 1.0);
        assert_eq!(r.signature.as_ref().unwrap().bits(), 64);
    }
}

#[test]
fn empirical_means_converge() {
    let spec = SyntheticSpec { ambiguous_fraction: 0.0, photos_per_hotspot: 400, ..small_spec(13) };
    let data = generate_synthetic(&spec).unwrap();
    let dim = spec.feature_dim;
    let mut sums = vec![vec![0.0; dim]; spec.n_hotspots];
    let mut counts = vec![0usize; spec.n_hotspots];
    for (r, &h) in data.dataset.records.iter().zip(&data.photo_hotspot) {
        counts[h] += 1;
        sums[h].iter_mut().zip(&r.features).for_each(|(s, x)| *s += x);
    }
    for h in 0..spec.n_hotspots {
        let n = counts[h];
        assert!(n > 20);
        let rms = (sums[h]
            .iter()
            .zip(&data.hotspots[h].mean)
            .map(|(s, m)| (s / n as f64 - m).powi(2))
            .sum::<f64>()
            / dim as f64)
            .sqrt();
        assert!(rms <= 3.0 * spec.noise_sigma / (n as f64).sqrt(), "hotspot {h}: {rms}");
    }
}

#[test]
fn invalid_synthetic_specs_rejected() {
    for spec in [
        SyntheticSpec { label_noise: 1.5, ..SyntheticSpec::default() },
        SyntheticSpec { ambiguous_fraction: -0.1, ..SyntheticSpec::default() },
        SyntheticSpec { n_hotspots: 0, ..SyntheticSpec::default() },
        SyntheticSpec { album_len: (5, 2), ..SyntheticSpec::default() },
    ] {
        assert!(generate_synthetic(&spec).is_err());
    }
}

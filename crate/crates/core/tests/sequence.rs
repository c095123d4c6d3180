use geocell::bench::{run_benchmark, BenchConfig, VariantSpec};
use geocell::classifier::{CellDistribution, Classifier, ModelConfig};
use geocell::dataset::{Album, PhotoRecord};
use geocell::eval::{localization_error_km, median};
use geocell::nn::ParamSet;
use geocell::partition::{Partition, PartitionParams};
use geocell::sequence::{
    average_baseline, lstm_step, predict_sequence, train_sequence, LstmParams, LstmState, SeqParams,
    SequenceConfig, SequenceModel, Variant,
};
use geocell::sphere::{CellId, GeoPoint};
use geocell::Error;
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL_VARIANTS: [Variant; 5] =
    [Variant::Basic, Variant::Offset(1), Variant::Offset(2), Variant::Repeated, Variant::Bidirectional];

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM cell with gate blocks ordered input, forget, output, candidate.
fn scalar_step(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let pre = |row: usize| {
        let mut z = p.b[row];
        for (k, xv) in x.iter().enumerate() {
            z += p.w[[row, k]] * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            z += p.u[[row, k]] * hv;
        }
        z
    };
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sig(pre(j));
        let f = sig(pre(hd + j));
        let o = sig(pre(2 * hd + j));
        let g = pre(3 * hd + j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

fn run_lstm(p: &LstmParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hd = p.hidden_dim();
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    xs.iter()
        .map(|x| {
            (h, c) = scalar_step(p, x, &h, &c);
            h.clone()
        })
        .collect()
}

fn head_logits(p: &SeqParams, h: &[f64]) -> Vec<f64> {
    (0..p.head.fan_out())
        .map(|r| p.head.b[r] + h.iter().enumerate().map(|(k, v)| p.head.w[[r, k]] * v).sum::<f64>())
        .collect()
}

fn rand_seq(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn arrays(xs: &[Vec<f64>]) -> Vec<Array1<f64>> {
    xs.iter().map(|x| Array1::from(x.clone())).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Sequence-model output for `xs` computed from the scalar oracle.
fn oracle_logits(p: &SeqParams, variant: Variant, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = xs.len();
    let e = xs[0].len();
    match variant {
        Variant::Basic => run_lstm(&p.forward, xs).iter().map(|h| head_logits(p, h)).collect(),
        Variant::Offset(k) => {
            let mut padded = xs.to_vec();
            padded.extend(std::iter::repeat_n(vec![0.0; e], k));
            run_lstm(&p.forward, &padded)[k..].iter().map(|h| head_logits(p, h)).collect()
        }
        Variant::Repeated => {
            let twice: Vec<Vec<f64>> = xs.iter().chain(xs).cloned().collect();
            run_lstm(&p.forward, &twice)[n..].iter().map(|h| head_logits(p, h)).collect()
        }
        Variant::Bidirectional => {
            let hf = run_lstm(&p.forward, xs);
            let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
            let hb = run_lstm(p.backward.as_ref().unwrap(), &rev);
            (0..n)
                .map(|t| {
                    let joint: Vec<f64> = hf[t].iter().chain(&hb[n - 1 - t]).copied().collect();
                    head_logits(p, &joint)
                })
                .collect()
        }
    }
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let mut p = LstmParams::new(&mut rng, 3, 2);
        p.b.iter_mut().for_each(|b| *b += rng.random_range(-0.5..0.5));
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let state = LstmState { h: Array1::from(h.clone()), c: Array1::from(c.clone()) };
        let out = lstm_step(&p, &x, &state).unwrap();
        let (h2, c2) = scalar_step(&p, &x, &h, &c);
        assert!(close(out.h.as_slice().unwrap(), &h2, 1e-12), "trial {trial}");
        assert!(close(out.c.as_slice().unwrap(), &c2, 1e-12), "trial {trial}");
    }
}

#[test]
fn zero_cell_gives_zero_output() {
    let p = LstmParams::zeros(4, 3);
    let out = lstm_step(&p, &[1.0, -2.0, 3.0, 0.5], &LstmState::zeros(3)).unwrap();
    assert!(out.h.iter().all(|v| *v == 0.0));
    assert!(lstm_step(&p, &[1.0], &LstmState::zeros(3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lstm_state_stays_bounded(seed in 0u64..10_000, scale in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LstmParams::new(&mut rng, 3, 4);
        p.w.mapv_inplace(|v| v * scale);
        p.u.mapv_inplace(|v| v * scale);
        let mut state = LstmState::zeros(4);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-scale..scale)).collect();
            let next = lstm_step(&p, &x, &state).unwrap();
            prop_assert!(next.h.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            for (c2, c1) in next.c.iter().zip(&state.c) {
                prop_assert!(c2.abs() <= c1.abs() + 1.0 + 1e-12);
            }
            state = next;
        }
    }
}

#[test]
fn every_variant_matches_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in ALL_VARIANTS {
        let p = SeqParams::new(&mut rng, v, 3, 4, 5);
        for n in [3, 5, 8] {
            let xs = rand_seq(&mut rng, n, 3);
            let (logits, none) = p.forward_backward(v, &arrays(&xs), None);
            assert!(none.is_none());
            let oracle = oracle_logits(&p, v, &xs);
            assert_eq!(logits.len(), n, "{v}");
            for (a, b) in logits.iter().zip(&oracle) {
                assert!(close(a.as_slice().unwrap(), b, 1e-12), "{v} n={n}");
            }
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for v in ALL_VARIANTS {
        let p = SeqParams::new(&mut rng, v, 3, 2, 3);
        let xs = arrays(&rand_seq(&mut rng, 4, 3));
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let (_, out) = p.forward_backward(v, &xs, Some(&labels));
        let (_, grad) = out.unwrap();
        let loss = |q: &SeqParams| q.forward_backward(v, &xs, Some(&labels)).1.unwrap().0;
        let mut q = p.clone();
        for t in 0..q.slices().len() {
            for i in 0..q.slices()[t].len() {
                let orig = q.slices()[t][i];
                q.slices_mut()[t][i] = orig + h;
                let up = loss(&q);
                q.slices_mut()[t][i] = orig - h;
                let down = loss(&q);
                q.slices_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.slices()[t][i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                assert!(rel < 1e-4, "{v} tensor {t} index {i}: {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn basic_is_causal_and_bidirectional_is_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in [Variant::Basic, Variant::Bidirectional, Variant::Repeated] {
        let p = SeqParams::new(&mut rng, v, 3, 4, 4);
        let xs = rand_seq(&mut rng, 3, 3);
        let mut changed = xs.clone();
        changed[2] = vec![2.0, -2.0, 2.0];
        let (a, _) = p.forward_backward(v, &arrays(&xs), None);
        let (b, _) = p.forward_backward(v, &arrays(&changed), None);
        let first_same = a[0] == b[0] && a[1] == b[1];
        match v {
            Variant::Basic => assert!(first_same),
            _ => assert!(!first_same, "{v} ignored a later photo"),
        }
        assert_ne!(a[2], b[2]);
    }
}

fn face_partition(n: u8) -> Partition {
    let cells = (0..n).map(|f| CellId::from_face(f).unwrap()).collect();
    Partition::from_parts(cells, vec![10; n as usize], PartitionParams { t1: 10, t2: 1, max_level: 30 }).unwrap()
}

fn image_model(partition: &Partition, dim: usize, seed: u64) -> Classifier {
    let mut m = Classifier::new(ModelConfig { input_dim: dim, hidden: vec![3], n_classes: partition.len(), seed }).unwrap();
    m.partition_fingerprint = partition.fingerprint();
    m
}

fn album(id: &str, rng: &mut ChaCha8Rng, partition: &Partition, n: usize, dim: usize) -> Album {
    let photos = (0..n)
        .map(|k| {
            let class = rng.random_range(0..partition.len());
            let features = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut r = PhotoRecord::new(format!("{id}-{k}"), partition.center(class).unwrap(), features);
            r.album_id = Some(id.into());
            r.timestamp = Some(k as i64);
            r
        })
        .collect();
    Album { album_id: id.into(), photos }
}

fn small_config(v: Variant, seed: u64) -> SequenceConfig {
    SequenceConfig { hidden_dim: 4, epochs: 3, batch_size: 2, seed, ..SequenceConfig::new(v) }
}

#[test]
fn training_touches_only_sequence_parameters() {
    let part = face_partition(4);
    let img = image_model(&part, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let albums: Vec<Album> = (0..6).map(|i| album(&format!("a{i}"), &mut rng, &part, 4 + i, 5)).collect();
    for v in ALL_VARIANTS {
        let cfg = small_config(v, 7);
        let init = SequenceModel::new(cfg.clone(), img.clone()).unwrap();
        let (m, log) = train_sequence(&albums, &img, &part, &cfg).unwrap();
        assert_eq!(m.image_model, img);
        assert_ne!(m.params, init.params, "{v}");
        assert_eq!(log.sequences, 6);
        assert_eq!(log.epoch_losses.len(), 3);
        let (again, _) = train_sequence(&albums, &img, &part, &cfg).unwrap();
        assert_eq!(again, m);
        for a in &albums {
            let dists = predict_sequence(&m, a).unwrap();
            assert_eq!(dists.len(), a.photos.len());
            for d in &dists {
                assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(predict_sequence(&m, a).unwrap(), dists);
        }
    }
}

#[test]
fn degenerate_albums() {
    let part = face_partition(3);
    let img = image_model(&part, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let singles: Vec<Album> = (0..5).map(|i| album(&format!("s{i}"), &mut rng, &part, 1, 4)).collect();
    let (m, log) = train_sequence(&singles, &img, &part, &small_config(Variant::Basic, 1)).unwrap();
    assert_eq!((log.sequences, log.skipped), (5, 0));
    assert_eq!(predict_sequence(&m, &singles[0]).unwrap().len(), 1);

    let pairs: Vec<Album> = (0..7).map(|i| album(&format!("p{i}"), &mut rng, &part, 2, 4)).collect();
    let (m, log) = train_sequence(&pairs, &img, &part, &small_config(Variant::Offset(2), 1)).unwrap();
    assert_eq!((log.sequences, log.skipped), (0, pairs.len()));
    assert!(matches!(predict_sequence(&m, &pairs[0]), Err(Error::Sequence(_))));
}

#[test]
fn uncovered_photos_are_dropped() {
    let part = face_partition(2);
    let img = image_model(&part, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut a = album("x", &mut rng, &part, 5, 4);
    // Face 4 is the north polar face, outside this partition.
    a.photos[1].geo = GeoPoint::new(89.0, 0.0).unwrap();
    let (_, log) = train_sequence(&[a], &img, &part, &small_config(Variant::Basic, 2)).unwrap();
    assert_eq!((log.uncovered_photos, log.sequences), (1, 1));
}

#[test]
fn long_albums_are_chunked() {
    let part = face_partition(3);
    let img = image_model(&part, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = album("long", &mut rng, &part, 11, 4);
    let cfg = SequenceConfig { max_len: Some(4), ..small_config(Variant::Bidirectional, 3) };
    let m = SequenceModel::new(cfg, img.clone()).unwrap();
    let dists = predict_sequence(&m, &a).unwrap();
    let embeds: Vec<Vec<f64>> = a.photos.iter().map(|p| img.embed(&p.features).unwrap()).collect();
    let mut expected = Vec::new();
    for chunk in embeds.chunks(4) {
        expected.extend(oracle_logits(&m.params, Variant::Bidirectional, chunk));
    }
    assert_eq!(dists.len(), 11);
    for (d, z) in dists.iter().zip(&expected) {
        let o = CellDistribution::from_logits(Array1::from(z.clone()).view());
        assert!(close(&d.probs, &o.probs, 1e-12));
    }
}

#[test]
fn averaging_baseline() {
    let part = face_partition(5);
    let img = image_model(&part, 6, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut same = album("same", &mut rng, &part, 4, 6);
    let first = same.photos[0].features.clone();
    same.photos.iter_mut().for_each(|p| p.features = first.clone());
    let single = img.predict(&first).unwrap();
    for d in average_baseline(&img, &same).unwrap() {
        assert!(close(&d.probs, &single.probs, 1e-15));
    }

    let a = album("five", &mut rng, &part, 5, 6);
    let out = average_baseline(&img, &a).unwrap();
    let mut mean = vec![0.0; part.len()];
    for p in &a.photos {
        let d = img.predict(&p.features).unwrap();
        for (m, v) in mean.iter_mut().zip(&d.probs) {
            *m += v / 5.0;
        }
    }
    assert_eq!(out.len(), 5);
    for d in &out {
        assert!(close(&d.probs, &mean, 1e-12));
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let one_hot = |c: usize| {
        let mut v = vec![0.0; 4];
        v[c] = 1.0;
        CellDistribution::new(v).unwrap()
    };
    let m = CellDistribution::mean(&[one_hot(1), one_hot(3)]).unwrap();
    assert_eq!(m.probs, vec![0.0, 0.5, 0.0, 0.5]);
    assert!(average_baseline(&img, &Album { album_id: "e".into(), photos: vec![] }).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let part = face_partition(4);
    let img = image_model(&part, 5, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let albums: Vec<Album> = (0..3).map(|i| album(&format!("c{i}"), &mut rng, &part, 5, 5)).collect();
    let dir = tempfile::tempdir().unwrap();
    for v in ALL_VARIANTS {
        let (m, _) = train_sequence(&albums, &img, &part, &small_config(v, 18)).unwrap();
        let path = dir.path().join(format!("{v}.json"));
        m.save(&path).unwrap();
        let back = SequenceModel::load_for(&path, &part).unwrap();
        assert_eq!(back, m);
        assert_eq!(predict_sequence(&back, &albums[0]).unwrap(), predict_sequence(&m, &albums[0]).unwrap());
        assert!(matches!(SequenceModel::load_for(&path, &face_partition(3)), Err(Error::VersionMismatch(_))));
    }
    assert!(train_sequence(&albums, &img, &face_partition(3), &small_config(Variant::Basic, 0)).is_err());
}

/// Albums that open with one distinctive photo and continue with ambiguous ones.
fn anchored_albums(run: &geocell::bench::BenchRun, per_hotspot: usize) -> Vec<Album> {
    let data = &run.data;
    let mut out = Vec::new();
    for (h, spot) in data.hotspots.iter().enumerate() {
        if run.partition.class_of(&spot.geo).is_none() {
            continue;
        }
        for a in 0..per_hotspot {
            let id = format!("anchor{h}-{a}");
            let photos = (0..6)
                .map(|k| {
                    let features = if k == 0 {
                        spot.mean.clone()
                    } else {
                        data.generic_means[(a + k) % data.generic_means.len()].clone()
                    };
                    let mut r = PhotoRecord::new(format!("{id}-{k}"), spot.geo, features);
                    r.album_id = Some(id.clone());
                    r.timestamp = Some(k as i64);
                    r
                })
                .collect();
            out.push(Album { album_id: id, photos });
        }
    }
    out
}

#[test]
fn lstm_carries_location_to_ambiguous_photos() {
    let cfg = BenchConfig {
        variants: vec![VariantSpec { name: "basic".into(), variant: Variant::Basic, max_len: None }],
        rules: vec![],
        ..BenchConfig::default()
    };
    let mut lstm_errors = Vec::new();
    let mut single_errors = Vec::new();
    for seed in 0..5 {
        let run = run_benchmark(&cfg, seed).unwrap();
        let seq = &run.sequence_models[0].1;
        let albums = anchored_albums(&run, 3);
        assert!(!albums.is_empty());
        let (mut l, mut s, mut n) = (0.0, 0.0, 0.0);
        for a in &albums {
            let preds = predict_sequence(seq, a).unwrap();
            for (p, d) in a.photos.iter().zip(&preds).skip(1) {
                let single = run.model.predict(&p.features).unwrap();
                l += localization_error_km(d.argmax(), &p.geo, &run.partition).unwrap();
                s += localization_error_km(single.argmax(), &p.geo, &run.partition).unwrap();
                n += 1.0;
            }
        }
        lstm_errors.push(l / n);
        single_errors.push(s / n);
    }
    let (lm, sm) = (median(&lstm_errors).unwrap(), median(&single_errors).unwrap());
    assert!(lm < sm, "lstm {lm} km vs single {sm} km");
}

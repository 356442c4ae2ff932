use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::tests::tiny_config;
use crate::model::AttentionKind;

fn reps(rows: &[[f32; 2]], labels: &[usize]) -> RepMatrix {
    RepMatrix::new(
        rows.len(),
        2,
        rows.iter().flatten().copied().collect(),
        Some(labels.to_vec()),
    )
    .unwrap()
}

fn gaussian_reps(n: usize, d: usize, seed: u64, label: impl Fn(usize, &mut ChaCha8Rng) -> usize) -> RepMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * d).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
    let labels = (0..n).map(|i| label(i, &mut r)).collect();
    RepMatrix::new(n, d, values, Some(labels)).unwrap()
}

fn random_grids(n: usize, h: usize, w: usize, k: u32, seed: u64) -> Vec<TokenGrid> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenGrid::new(h, w, (0..h * w).map(|_| r.gen_range(0..k)).collect()).unwrap())
        .collect()
}

#[test]
fn linear_probe_separates_separable_points() {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let t = i as f32 / 40.0;
        rows.push([1.0 + t, 0.5 - t]);
        labels.push(0);
        rows.push([-1.0 - t, 0.3 + t]);
        labels.push(1);
    }
    let m = reps(&rows, &labels);
    let r = linear_probe(&m, &m, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.confidences.iter().all(|&c| (0.5..=1.0).contains(&c)));
}

#[test]
fn linear_probe_on_shuffled_labels_is_chance() {
    let train = gaussian_reps(400, 8, 1, |i, _| i % 2);
    let test = gaussian_reps(1000, 8, 2, |i, _| i % 2);
    let r = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
    assert!((r.accuracy - 0.5).abs() <= 0.05, "{}", r.accuracy);
}

#[test]
fn linear_probe_requires_every_class_in_training() {
    let train = reps(&[[0.0, 1.0], [1.0, 0.0]], &[0, 0]);
    let test = reps(&[[0.0, 1.0]], &[1]);
    assert!(linear_probe(&train, &test, &ProbeConfig::default()).is_err());
}

/// Independent k-NN: repeated selection of the most similar unused row.
fn knn_oracle(train: &RepMatrix, test: &RepMatrix, k: usize) -> Vec<usize> {
    let yl = train.labels.as_ref().unwrap();
    (0..test.n)
        .map(|i| {
            let q = test.row(i);
            let sim = |j: usize| {
                let r = train.row(j);
                let dot: f64 = q.iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum();
                let n1: f64 = q.iter().map(|a| (*a as f64) * (*a as f64)).sum::<f64>().sqrt();
                let n2: f64 = r.iter().map(|a| (*a as f64) * (*a as f64)).sum::<f64>().sqrt();
                dot / (n1 * n2)
            };
            let mut used = vec![false; train.n];
            let mut chosen = Vec::new();
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for j in 0..train.n {
                    if !used[j] && best.is_none_or(|b| sim(j) > sim(b)) {
                        best = Some(j);
                    }
                }
                used[best.unwrap()] = true;
                chosen.push(best.unwrap());
            }
            let classes = yl.iter().max().unwrap() + 1;
            let score = |c: usize| {
                let members: Vec<usize> = chosen.iter().copied().filter(|&j| yl[j] == c).collect();
                (members.len(), members.iter().map(|&j| sim(j)).sum::<f64>())
            };
            let mut best = 0;
            for c in 1..classes {
                let (a, b) = (score(c), score(best));
                if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[test]
fn knn_matches_exhaustive_oracle() {
    for seed in 0..5 {
        let train = gaussian_reps(20, 3, seed, |_, r| r.gen_range(0..3));
        let test = gaussian_reps(15, 3, seed + 100, |_, r| r.gen_range(0..3));
        for k in [1, 2, 4, 5] {
            let got = knn_probe(&train, &test, k).unwrap();
            assert_eq!(got.predictions, knn_oracle(&train, &test, k), "seed {seed} k {k}");
        }
    }
}

#[test]
fn knn_trivial_cases() {
    let train = reps(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]], &[0, 1, 2]);
    let test = reps(&[[0.0, 1.0]], &[1]);
    assert_eq!(knn_probe(&train, &test, 1).unwrap().predictions, vec![1]);
    let same = reps(&[[1.0, 0.0], [0.3, 1.0], [-1.0, 0.2]], &[4, 4, 4]);
    let t = reps(&[[0.5, 0.5], [-2.0, 1.0]], &[4, 4]);
    assert_eq!(knn_probe(&same, &t, 3).unwrap().error_rate, 0.0);
    assert!(knn_probe(&train, &test, 0).is_err());
    assert!(knn_probe(&train, &test, 4).is_err());
}

#[test]
fn ece_trivial_fixtures() {
    let (e, bins) = ece(&[1.0; 5], &[true; 5], 10).unwrap();
    assert_eq!(e, 0.0);
    assert_eq!(bins.bins[9].count, 5);
    let correct: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
    let (e, _) = ece(&[0.9; 10], &correct, 10).unwrap();
    assert!((e - 0.4).abs() < 1e-12);
    assert!(ece(&[], &[], 10).is_err());
}

#[test]
fn ece_two_bin_hand_computation() {
    let conf = [0.15, 0.18, 0.12, 0.85, 0.9, 0.88];
    let correct = [true, false, false, true, true, false];
    let (e, bins) = ece(&conf, &correct, 10).unwrap();
    // bin (0.1, 0.2]: conf 0.15, acc 1/3; bin (0.8, 0.9]: conf 2.63/3, acc 2/3
    let expect = 0.5 * (1.0 / 3.0 - 0.15) + 0.5 * (2.63 / 3.0 - 2.0 / 3.0);
    assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
    assert_eq!(
        bins.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
        [0, 3, 0, 0, 0, 0, 0, 0, 3, 0]
    );
}

#[test]
fn ece_bins_close_on_the_right() {
    let (_, bins) = ece(&[0.0, 0.1, 0.3, 0.30000001, 0.7, 1.0], &[true; 6], 10).unwrap();
    let counts: Vec<usize> = bins.bins.iter().map(|b| b.count).collect();
    assert_eq!(counts, [2, 0, 1, 1, 0, 0, 1, 0, 0, 1]);
    assert_eq!(counts.iter().sum::<usize>(), 6);
}

#[test]
fn ece_is_permutation_invariant() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let conf: Vec<f64> = (0..50).map(|_| r.gen()).collect();
    let ok: Vec<bool> = (0..50).map(|_| r.gen()).collect();
    let (a, _) = ece(&conf, &ok, 10).unwrap();
    let (b, _) = ece(
        &conf.iter().rev().copied().collect::<Vec<_>>(),
        &ok.iter().rev().copied().collect::<Vec<_>>(),
        10,
    )
    .unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn lowshot_full_fraction_equals_full_probe() {
    let train = gaussian_reps(60, 4, 5, |i, _| i % 3);
    let test = gaussian_reps(30, 4, 6, |i, _| i % 3);
    let cfg = ProbeConfig {
        epochs: 20,
        ..Default::default()
    };
    let full = linear_probe(&train, &test, &cfg).unwrap();
    let low = lowshot_probe(&train, &test, 1.0, &[1, 2], &cfg).unwrap();
    assert_eq!(low.runs[0].accuracy, full.accuracy);
    assert_eq!(low.runs[0], LowShotRun { seed: 1, ..low.runs[1] });
    assert_eq!(low.runs[0].n_train, 60);
    let sub = stratified_subsample(train.labels.as_ref().unwrap(), 0.1, 9).unwrap();
    assert_eq!(sub.len(), 6);
    assert!(stratified_subsample(train.labels.as_ref().unwrap(), 0.01, 9).is_err());
}

#[test]
fn rep_file_round_trip() {
    let m = gaussian_reps(7, 3, 1, |i, _| i % 2);
    let back = RepMatrix::from_bytes(&m.to_bytes(), "mem").unwrap();
    assert_eq!(back, m);
    let bytes = m.to_bytes();
    assert!(RepMatrix::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
}

#[test]
fn extraction_is_batch_independent() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 1).unwrap();
    let grids = random_grids(32, 3, 3, 5, 2);
    for source in [
        RepSource::EncoderPooled,
        RepSource::BlockPooled(1),
        RepSource::BlockPooled(2),
    ] {
        let a = extract_reps(&m, &grids, None, source, 1).unwrap();
        let b = extract_reps(&m, &grids, None, source, 32).unwrap();
        assert_eq!((a.n, a.d, a.source), (b.n, b.d, b.source));
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= 1e-5));
    }
    let constant = vec![grids[0].clone(); 4];
    let c = extract_reps(&m, &constant, None, RepSource::EncoderPooled, 3).unwrap();
    assert!((1..4).all(|i| c.row(i) == c.row(0)));
}

#[test]
fn half_position_is_the_encoder_representation() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Dense), 1).unwrap();
    let grids = random_grids(4, 3, 3, 5, 3);
    let src = rep_source(&m, TrainMode::Gcrl, RepPosition::Half).unwrap();
    let r = extract_reps(&m, &grids, None, src, 4).unwrap();
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    assert_eq!(r.values, m.encode_representation(&refs).unwrap().data());
    assert_eq!(
        rep_source(&m, TrainMode::GenerativeOnly, RepPosition::Half).unwrap(),
        RepSource::BlockPooled(1)
    );
    assert_eq!(
        rep_source(&m, TrainMode::Gcrl, RepPosition::Last).unwrap(),
        RepSource::BlockPooled(2)
    );
    assert!(rep_source(&m, TrainMode::ContrastiveOnly, RepPosition::Last).is_err());
}

fn zero_head(m: &mut GcrlModel) {
    m.param_mut("out_head").unwrap().data_mut().fill(0.0);
}

#[test]
fn zero_head_bpd_is_log2_k() {
    let mut m = GcrlModel::init(tiny_config(3, 4, AttentionKind::Axial), 1).unwrap();
    zero_head(&mut m);
    let r = eval_bpd(&m, &random_grids(5, 3, 4, 5, 1), 2).unwrap();
    assert!((r.bpd - 5f64.log2()).abs() < 1e-3, "{}", r.bpd);
}

#[test]
fn greedy_sampling_ignores_the_seed_and_respects_causality() {
    let m = GcrlModel::init(tiny_config(3, 3, AttentionKind::Axial), 4).unwrap();
    let marginal = [1, 5, 0, 2, 0];
    let a = sample(&m, 3, Sampling::Greedy, 1, &marginal).unwrap();
    assert_eq!(a, sample(&m, 3, Sampling::Greedy, 99, &marginal).unwrap());
    assert!(a.iter().all(|g| g.tokens[0] == 1));
    // every token is the argmax given the final grid, which only holds if
    // later tokens do not influence earlier logits
    let refs: Vec<&TokenGrid> = a.iter().collect();
    let logits = m.decoder_logits(&refs).unwrap();
    for (i, g) in a.iter().enumerate() {
        for t in 1..9 {
            let row = &logits.data()[(i * 9 + t - 1) * 5..(i * 9 + t) * 5];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            assert_eq!(g.tokens[t] as usize, best);
        }
    }
}

#[test]
fn temperature_sampling_is_seeded_and_in_range() {
    let m = GcrlModel::init(tiny_config(2, 3, AttentionKind::Dense), 4).unwrap();
    let marginal = [1, 1, 1, 1, 1];
    let a = sample(&m, 4, Sampling::Temperature(1.0), 5, &marginal).unwrap();
    assert_eq!(a, sample(&m, 4, Sampling::Temperature(1.0), 5, &marginal).unwrap());
    assert_ne!(a, sample(&m, 4, Sampling::Temperature(1.0), 6, &marginal).unwrap());
    assert!(a.iter().flat_map(|g| &g.tokens).all(|&t| t < 5));
    // the stream of image i does not depend on how many images are drawn
    assert_eq!(
        sample(&m, 2, Sampling::Temperature(1.0), 5, &marginal).unwrap()[..],
        a[..2]
    );
    for bad in [0.0, -1.0] {
        assert!(sample(&m, 1, Sampling::Temperature(bad), 5, &marginal).is_err());
    }
}

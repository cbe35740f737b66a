//! Synthetic generator, split, batching and dataset files.

use std::collections::BTreeSet;

use cgz::data::{
    batches, decode_dataset, encode_dataset, read_dataset, split_dataset, stack_images, stack_labels,
    write_dataset, BatchMode, GazeSample, Generator, IRIS_GAIN, LABEL_BOUND,
};
use cgz::rng;
use cgz::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recovers (pitch, yaw) from the darkness-weighted centroid of an
/// untransformed image: dark iris pixels pull the centroid, bright sclera
/// and skin contribute nothing.
fn centroid_labels(s: &GazeSample) -> (f64, f64) {
    let &[_, h, w] = s.image.shape() else { panic!("rgb image") };
    let plane = h * w;
    let d = s.image.data();
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let mean = (d[p] + d[plane + p] + d[2 * plane + p]) as f64 / 3.0;
            let weight = (0.4 - mean).max(0.0);
            sw += weight;
            sx += weight * (col as f64 + 0.5);
            sy += weight * (row as f64 + 0.5);
        }
    }
    let gain = IRIS_GAIN * w as f64 / 64.0;
    let center = w as f64 / 2.0;
    (((sy / sw - center) / gain).asin(), ((sx / sw - center) / gain).asin())
}

#[test]
fn iris_centroid_recovers_labels_without_jitter() {
    let g = Generator { jitter: false, size: 64 };
    let samples = g.dataset(100, 17);
    let mut worst: f64 = 0.0;
    for s in &samples {
        let (p, y) = centroid_labels(s);
        worst = worst.max((p - s.pitch as f64).abs()).max((y - s.yaw as f64).abs());
    }
    assert!(worst < 0.05, "worst label error {worst} rad");
}

#[test]
fn straight_gaze_puts_iris_at_center() {
    let g = Generator { jitter: false, size: 64 };
    let s = g.render(0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let (p, y) = centroid_labels(&s);
    // One pixel of centroid offset corresponds to asin(1 / gain).
    let one_pixel = (1.0 / IRIS_GAIN).asin();
    assert!(p.abs() < one_pixel && y.abs() < one_pixel);
}

#[test]
fn label_marginals_are_centered_and_bounded() {
    // Labels are drawn before rendering, so small images share them.
    let samples = Generator { jitter: true, size: 8 }.dataset(10_000, 23);
    let n = samples.len() as f64;
    let mean_p = samples.iter().map(|s| s.pitch as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.yaw as f64).sum::<f64>() / n;
    assert!(mean_p.abs() < 0.02 && mean_y.abs() < 0.02, "{mean_p} {mean_y}");
    for s in &samples {
        assert!(s.pitch.abs() <= LABEL_BOUND && s.yaw.abs() <= LABEL_BOUND);
    }
    let labels_64 = Generator::default().dataset(5, 23);
    for (a, b) in samples.iter().zip(&labels_64) {
        assert_eq!((a.pitch, a.yaw), (b.pitch, b.yaw));
    }
}

#[test]
fn pixels_are_in_unit_range_and_deterministic() {
    let g = Generator::default();
    let a = g.sample(&mut rng::stream(5, &[1]));
    let b = g.sample(&mut rng::stream(5, &[1]));
    assert_eq!(a, b);
    assert_eq!(a.image.shape(), &[3, 64, 64]);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(g.dataset(3, 9), g.dataset(3, 9));
    assert_ne!(g.dataset(3, 9), g.dataset(3, 10));
}

#[test]
fn split_examples() {
    let s = split_dataset(1000, 0).unwrap();
    assert_eq!((s.pretrain_unlabeled.len(), s.finetune_labeled.len()), (800, 200));
    let s = split_dataset(5, 0).unwrap();
    assert_eq!((s.pretrain_unlabeled.len(), s.finetune_labeled.len()), (4, 1));
    assert!(split_dataset(4, 0).is_err());
    assert_eq!(split_dataset(1000, 3).unwrap(), split_dataset(1000, 3).unwrap());
    assert_ne!(split_dataset(1000, 3).unwrap(), split_dataset(1000, 4).unwrap());
}

#[test]
fn batch_examples() {
    let idx: Vec<usize> = (0..10).collect();
    assert_eq!(batches(&idx, 4, 0, 0, BatchMode::Contrastive).unwrap().len(), 2);
    assert_eq!(batches(&idx, 4, 0, 0, BatchMode::Finetune).unwrap().len(), 3);
    assert_ne!(
        batches(&idx, 10, 0, 0, BatchMode::Finetune).unwrap(),
        batches(&idx, 10, 0, 1, BatchMode::Finetune).unwrap()
    );
    assert!(batches(&idx, 0, 0, 0, BatchMode::Finetune).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_a_deterministic_disjoint_cover(n in 5usize..=100_000, seed in any::<u64>()) {
        let s = split_dataset(n, seed).unwrap();
        prop_assert_eq!(s.pretrain_unlabeled.len(), n * 8 / 10);
        let a: BTreeSet<usize> = s.pretrain_unlabeled.iter().copied().collect();
        let b: BTreeSet<usize> = s.finetune_labeled.iter().copied().collect();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(a.is_disjoint(&b));
        prop_assert!(a.union(&b).copied().eq(0..n));
        prop_assert_eq!(split_dataset(n, seed).unwrap(), s);
    }

    #[test]
    fn every_epoch_is_a_permutation(n in 1usize..300, b in 1usize..40, seed in any::<u64>(), epoch in 0u64..50) {
        let idx: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let fine = batches(&idx, b, seed, epoch, BatchMode::Finetune).unwrap();
        let mut all: Vec<usize> = fine.concat();
        all.sort_unstable();
        prop_assert_eq!(&all, &idx);
        prop_assert!(fine.iter().all(|x| !x.is_empty() && x.len() <= b));

        let con = batches(&idx, b, seed, epoch, BatchMode::Contrastive).unwrap();
        prop_assert_eq!(con.len(), n / b);
        prop_assert!(con.iter().all(|x| x.len() == b));
        let used: BTreeSet<usize> = con.concat().into_iter().collect();
        prop_assert_eq!(used.len(), (n / b) * b);
        prop_assert!(used.iter().all(|i| idx.contains(i)));
    }
}

fn random_samples(count: usize, size: usize, seed: u64) -> Vec<GazeSample> {
    Generator { jitter: true, size }.dataset(count, seed)
}

#[test]
fn files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cgzd");
    let samples = random_samples(100, 16, 31);
    write_dataset(&path, &samples).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.image.shape(), b.image.shape());
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!((a.pitch.to_bits(), a.yaw.to_bits()), (b.pitch.to_bits(), b.yaw.to_bits()));
    }
    let first = std::fs::read(&path).unwrap();
    write_dataset(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn corrupt_files_are_rejected() {
    let samples = random_samples(3, 8, 1);
    let mut bytes = Vec::new();
    encode_dataset(&mut bytes, &samples).unwrap();
    for cut in [0, 3, 17, 18, bytes.len() - 1] {
        let err = decode_dataset(&mut &bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&mut &bad[..]), Err(Error::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_dataset(&mut &bad[..]), Err(Error::Version { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&mut &long[..]), Err(Error::Corrupt(_))));
    let missing = read_dataset("/nonexistent/dir/file.cgzd").unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    assert!(missing.to_string().contains("file.cgzd"));
}

#[test]
fn stacking_preserves_order() {
    let samples = random_samples(4, 8, 2);
    let x = stack_images(&samples).unwrap();
    assert_eq!(x.shape(), &[4, 3, 8, 8]);
    assert_eq!(x.slice_rows(2, 1).unwrap().data(), samples[2].image.data());
    let y = stack_labels(&samples).unwrap();
    assert_eq!(y.shape(), &[4, 2]);
    assert_eq!(y.data()[6..8], [samples[3].pitch, samples[3].yaw]);
}

//! Objective and metric values against brute-force oracles.

use std::f64::consts::{LN_2, PI};

use cgz::losses::{
    angular_error, contrastive_loss, cosine_similarity, cross_correlation, huber_loss, mean_angular_error,
    ntxent_loss, pitchyaw_to_vector, redundancy_term, CrossCorrMatrix, HyperParams, LossVariant,
};
use cgz::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let cols = rows[0].len();
    Tensor::new([rows.len(), cols], rows.concat()).unwrap()
}

/// Enumerates every anchor of the stacked batch and its denominator terms.
fn ntxent_oracle(p1: &[Vec<f64>], p2: &[Vec<f64>], tau: f64) -> f64 {
    let b = p1.len();
    let z: Vec<&Vec<f64>> = p1.iter().chain(p2).collect();
    let sim = |i: usize, j: usize| {
        let dot: f64 = z[i].iter().zip(z[j]).map(|(a, b)| a * b).sum();
        let ni: f64 = z[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nj: f64 = z[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (ni * nj)
    };
    let mut total = 0.0;
    for i in 0..2 * b {
        let pos = if i < b { i + b } else { i - b };
        let denom: f64 = (0..2 * b).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
        total += -((sim(i, pos) / tau).exp() / denom).ln();
    }
    total / (2 * b) as f64
}

fn ntxent(p1: &[Vec<f64>], p2: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(tensor(p1)), g.constant(tensor(p2)));
    let l = ntxent_loss(&mut g, a, b, tau).unwrap();
    g.value(l).item().unwrap()
}

fn redundancy_oracle(c: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, row) in c.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v * v;
            }
        }
    }
    s
}

/// Column standardization and `Z1ᵀ Z2 / B` written out in loops.
fn cross_correlation_oracle(p1: &[Vec<f64>], p2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = p1.len();
    let d = p1[0].len();
    let standardize = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; d]; b];
        for j in 0..d {
            let mean = p.iter().map(|r| r[j]).sum::<f64>() / b as f64;
            let var = p.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / b as f64;
            for i in 0..b {
                out[i][j] = (p[i][j] - mean) / var.sqrt();
            }
        }
        out
    };
    let (z1, z2) = (standardize(p1), standardize(p2));
    (0..d)
        .map(|i| (0..d).map(|j| (0..b).map(|k| z1[k][i] * z2[k][j]).sum::<f64>() / b as f64).collect())
        .collect()
}

fn huber(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new([pred.len(), 1], pred.to_vec()).unwrap());
    let t = g.constant(Tensor::new([target.len(), 1], target.to_vec()).unwrap());
    let l = huber_loss(&mut g, p, t, delta).unwrap();
    g.value(l).item().unwrap()
}

fn mae(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> f64 {
    let flat = |v: &[(f64, f64)]| Tensor::new([v.len(), 2], v.iter().flat_map(|&(a, b)| [a, b]).collect()).unwrap();
    mean_angular_error(&flat(pred), &flat(truth)).unwrap()
}

#[test]
fn ntxent_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in [2, 3, 4] {
        for d in [2, 8] {
            for _ in 0..20 {
                let (p1, p2) = (random(&mut rng, b, d), random(&mut rng, b, d));
                let tau = rng.random_range(0.1..1.0);
                let (got, want) = (ntxent(&p1, &p2, tau), ntxent_oracle(&p1, &p2, tau));
                assert!((got - want).abs() < 1e-8, "B={b} D={d}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn ntxent_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p1, p2) = (random(&mut rng, 1, 5), random(&mut rng, 1, 5));
    assert!(ntxent(&p1, &p2, 0.5).abs() < 1e-9);

    let e = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    for tau in [0.1, 0.5, 2.0] {
        let l = ntxent(&[e(0), e(1)], &[e(2), e(3)], tau);
        assert!((l - 3f64.ln()).abs() < 1e-9, "tau {tau}: {l}");
    }
    let l = ntxent(&[e(0), e(1)], &[e(0), e(1)], 0.5);
    assert!((l - (1.0 + 2.0 * (-2f64).exp()).ln()).abs() < 1e-9);
}

#[test]
fn ntxent_is_stable_for_small_temperatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p1, p2) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
    let l = ntxent(&p1, &p2, 1e-3);
    assert!(l.is_finite() && l >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntxent_symmetric_scale_invariant_and_nonnegative(
        b in 2usize..5, d in 1usize..6, seed in any::<u64>(), factor in 0.01f64..100.0, row in 0usize..4
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p1, mut p2) = (random(&mut rng, b, d), random(&mut rng, b, d));
        let base = ntxent(&p1, &p2, 0.5);
        prop_assert!(base >= 0.0);
        prop_assert!((base - ntxent(&p2, &p1, 0.5)).abs() < 1e-12);
        for v in &mut p2[row % b] {
            *v *= factor;
        }
        prop_assert!((base - ntxent(&p1, &p2, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn cross_correlation_matches_loop_oracle(b in 2usize..7, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p1, p2) = (random(&mut rng, b, d), random(&mut rng, b, d));
        let c = CrossCorrMatrix::between(&tensor(&p1), &tensor(&p2)).unwrap();
        let want = cross_correlation_oracle(&p1, &p2);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((c.get(i, j) - want[i][j]).abs() < 1e-9);
                prop_assert!(c.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn mae_is_symmetric_and_periodic_in_yaw(p in -1.5f64..1.5, y in -3.0f64..3.0, q in -1.5f64..1.5, z in -3.0f64..3.0) {
        let a = mae(&[(p, y)], &[(q, z)]);
        prop_assert!((a - mae(&[(q, z)], &[(p, y)])).abs() < 1e-9);
        prop_assert!((a - mae(&[(p, y + 2.0 * PI)], &[(q, z)])).abs() < 1e-6);
        prop_assert!((0.0..=180.0).contains(&a));
    }

    #[test]
    fn gaze_vectors_are_unit(p in -3.0f64..3.0, y in -3.0f64..3.0) {
        let v = pitchyaw_to_vector(p, y);
        prop_assert!((v.iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn redundancy_matches_two_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [1, 2, 4, 7] {
        let c = random(&mut rng, d, d);
        let got = CrossCorrMatrix::from_tensor(tensor(&c)).unwrap().redundancy();
        assert!((got - redundancy_oracle(&c)).abs() < 1e-10);
    }
    let identity = CrossCorrMatrix::from_tensor(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    assert_eq!(identity.redundancy(), 0.0);
    let ones = CrossCorrMatrix::from_tensor(Tensor::full([2, 2], 1.0)).unwrap();
    assert_eq!(ones.redundancy(), 2.0);
    let mut diag_only = vec![vec![0.0; 3]; 3];
    diag_only[1][1] = 5.0;
    assert_eq!(CrossCorrMatrix::from_tensor(tensor(&diag_only)).unwrap().redundancy(), 0.0);
    diag_only[0][2] = 1e-3;
    assert!(CrossCorrMatrix::from_tensor(tensor(&diag_only)).unwrap().redundancy() > 0.0);
}

#[test]
fn cross_correlation_closed_forms() {
    let col = [1.0, 2.0, 3.0, 4.0];
    let dup: Vec<Vec<f64>> = col.iter().map(|&v| vec![v, v]).collect();
    let c = CrossCorrMatrix::between(&tensor(&dup), &tensor(&dup)).unwrap();
    for v in c.values().data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let constant: Vec<Vec<f64>> = col.iter().map(|&v| vec![v, 7.0]).collect();
    let c = CrossCorrMatrix::between(&tensor(&constant), &tensor(&dup)).unwrap();
    assert_eq!((c.get(1, 0), c.get(1, 1)), (0.0, 0.0));
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::zeros([1, 3]));
    assert!(cross_correlation(&mut g, one, one).is_err());
}

#[test]
fn combined_loss_composes_both_terms() {
    let e = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let (p1, p2) = (vec![e(0), e(1)], vec![e(2), e(3)]);
    let c = cross_correlation_oracle(&p1, &p2);
    // Columns 2 and 3 of the first view (0 and 1 of the second) are constant;
    // the guarded standardization maps them to zero.
    let c: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect()).collect();
    let want = 3f64.ln() + 0.1 * redundancy_oracle(&c);

    let loss = |variant: LossVariant, gamma: f64| {
        let hp = HyperParams { gamma, batch_size: 2, loss_variant: variant, ..HyperParams::default() };
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(tensor(&p1)), g.constant(tensor(&p2)));
        let l = contrastive_loss(&mut g, a, b, &hp).unwrap();
        g.value(l).item().unwrap()
    };
    assert!((loss(LossVariant::Combined, 0.1) - want).abs() < 1e-9);
    assert_eq!(loss(LossVariant::Combined, 0.0), ntxent(&p1, &p2, 0.5));
    assert_eq!(loss(LossVariant::NtxentOnly, 0.1), ntxent(&p1, &p2, 0.5));
    assert!((loss(LossVariant::RedundancyOnly, 0.1) - redundancy_oracle(&c)).abs() < 1e-9);

    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(tensor(&p1)), g.constant(tensor(&p2)));
    let r = cross_correlation(&mut g, a, b).unwrap();
    let r = redundancy_term(&mut g, r).unwrap();
    assert!((g.value(r).item().unwrap() - redundancy_oracle(&c)).abs() < 1e-10);
}

#[test]
fn huber_branches_and_continuity() {
    assert_eq!(huber(&[0.0], &[0.0], 1.0), 0.0);
    assert_eq!(huber(&[1.0], &[0.0], 2.0), 0.5);
    assert_eq!(huber(&[3.0], &[0.0], 1.0), 2.5);
    assert_eq!(huber(&[0.0, 3.0], &[1.0, 0.0], 1.0), (0.5 + 2.5) / 2.0);
    for delta in [0.3, 1.0, 2.0] {
        let above = huber(&[delta + 1e-9], &[0.0], delta);
        let below = huber(&[delta - 1e-9], &[0.0], delta);
        assert!((above - below).abs() < 1e-6);
        let neg = huber(&[-(delta + 1e-9)], &[0.0], delta);
        assert!((above - neg).abs() < 1e-15);
    }
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(Tensor::zeros([2, 2])), g.constant(Tensor::zeros([2, 1])));
    assert!(huber_loss(&mut g, a, b, 1.0).is_err());
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity(&[3.0, -2.0], &[3.0, -2.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cosine_similarity(&[1.0, 2.0], &[3.0, 4.0]) - 11.0 / (5f64.sqrt() * 5.0)).abs() < 1e-12);
}

#[test]
fn metric_closed_forms() {
    assert_eq!(mae(&[(0.2, -0.4), (0.1, 0.3)], &[(0.2, -0.4), (0.1, 0.3)]), 0.0);
    assert!((mae(&[(0.0, 0.0)], &[(0.0, PI)]) - 180.0).abs() < 1e-9);
    assert!((mae(&[(0.0, 0.0)], &[(0.0, 0.1)]) - 5.72958).abs() < 1e-5);
    assert!((mae(&[(0.0, 0.0)], &[(0.0, 0.1)]) - 0.1f64.to_degrees()).abs() < 1e-9);
    assert_eq!(pitchyaw_to_vector(0.0, 0.0), [-0.0, -0.0, -1.0]);
    let v = pitchyaw_to_vector(0.0, PI / 2.0);
    assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
    assert!((angular_error((PI / 4.0, 0.0), (-PI / 4.0, 0.0)) - 90.0).abs() < 1e-9);
    assert!(mean_angular_error(&Tensor::<f64>::zeros([0, 2]), &Tensor::zeros([0, 2])).is_err());
    assert!(mean_angular_error(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])).is_err());
}

/// Spherical law of cosines, independent of the vector convention.
fn great_circle_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    let c = a.0.cos() * b.0.cos() * (a.1 - b.1).cos() + a.0.sin() * b.0.sin();
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn constant_prediction_matches_brute_force_average() {
    let grid: Vec<f64> = (0..15).map(|i| -0.7 + 0.1 * i as f64).collect();
    let truth: Vec<(f64, f64)> = grid.iter().flat_map(|&p| grid.iter().map(move |&y| (p, y))).collect();
    for c in [(0.0, 0.0), (0.3, -0.2), (-0.5, 0.6)] {
        let pred = vec![c; truth.len()];
        let want = truth.iter().map(|&t| great_circle_deg(c, t)).sum::<f64>() / truth.len() as f64;
        assert!((mae(&pred, &truth) - want).abs() < 1e-9);
    }
    // Zero pitch everywhere: the angle is the yaw difference.
    assert!((mae(&[(0.0, 0.0); 2], &[(0.0, 0.5), (0.0, -LN_2)]) - (0.5 + LN_2).to_degrees() / 2.0).abs() < 1e-9);
}

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::ndmath::Tensor;
use crate::objective::MmdKernelConfig;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest, Strategy};
use rand_distr::{Distribution, StandardNormal};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, shift: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            s + shift
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut s = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                s += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    s / pairs
}

fn brute_energy(a: &Tensor, b: &Tensor) -> f64 {
    let d = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let (n, m) = (a.rows(), b.rows());
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..n {
        for j in 0..m {
            ab += d(a.row(i), b.row(j));
        }
        for j in 0..n {
            aa += d(a.row(i), a.row(j));
        }
    }
    for i in 0..m {
        for j in 0..m {
            bb += d(b.row(i), b.row(j));
        }
    }
    2.0 * ab / (n * m) as f64 - aa / (n * n) as f64 - bb / (m * m) as f64
}

/// Exact two-sided MWU p by listing every subset of the pooled positions.
fn brute_mwu_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let n = a.len();
    let obs: f64 = ranks[..n].iter().sum();
    let (mut le, mut ge, mut all) = (0u64, 0u64, 0u64);
    let total = pooled.len();
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let s: f64 = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        all += 1;
        le += (s <= obs + 1e-9) as u64;
        ge += (s >= obs - 1e-9) as u64;
    }
    (2.0 * le.min(ge) as f64 / all as f64).min(1.0)
}

#[test]
fn auc_examples() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert_eq!(roc_auc(&[0.0, 0.1, 0.9, 1.0], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(StatsError::SingleClass));
}

#[test]
fn auprc_examples() {
    assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
    assert!(close(auprc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(), 0.25, 1e-15));
    assert_eq!(auprc(&[0.1, 0.2], &[0, 0]), Err(StatsError::NoPositives));
}

#[test]
fn auprc_of_random_scores_tracks_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let labels: Vec<u8> = (0..n).map(|_| (rng.random::<f64>() < 0.3) as u8).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let pi = labels.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
    assert!(close(auprc(&scores, &labels).unwrap(), pi, 0.02));
}

#[test]
fn bootstrap_ci_behaviour() {
    let scores: Vec<f64> = (0..60).map(|i| i as f64).collect();
    let labels: Vec<u8> = (0..60).map(|i| (i >= 30) as u8).collect();
    assert_eq!(
        bootstrap_ci(roc_auc, &scores, &labels, 200, 0.95, 1).unwrap(),
        (1.0, 1.0)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let e: f64 = StandardNormal.sample(&mut rng);
            l as f64 + 0.8 * e
        })
        .collect();
    let a = bootstrap_ci(roc_auc, &noisy, &labels, 500, 0.95, 4).unwrap();
    let b = bootstrap_ci(roc_auc, &noisy, &labels, 500, 0.95, 4).unwrap();
    assert_eq!(a, b);
    let point = roc_auc(&noisy, &labels).unwrap();
    assert!(a.0 < point && point < a.1);
    assert!(bootstrap_ci(roc_auc, &noisy, &labels, 50, 0.95, 4).is_err());
}

#[test]
fn energy_examples() {
    let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let b = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    assert_eq!(energy_distance(&a, &b).unwrap(), 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal_matrix(&mut rng, 30, 4, 0.0);
    assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
}

#[test]
fn mmd_null_and_alternative() {
    let cfg = MmdKernelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = normal_matrix(&mut rng, 200, 5, 0.0);
    let b = normal_matrix(&mut rng, 200, 5, 0.0);
    assert!(mmd_two_sample(&a, &b, &cfg).unwrap().abs() < 0.02);
    let shifted = a.map(|v| v + 3.0);
    assert!(mmd_two_sample(&a, &shifted, &cfg).unwrap() > 0.3);
}

#[test]
fn permutation_fast_paths_match_generic() {
    let cfg = MmdKernelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = normal_matrix(&mut rng, 12, 3, 0.0);
    let b = normal_matrix(&mut rng, 9, 3, 0.4);
    let fast = permutation_test_energy(&a, &b, 200, 7).unwrap();
    let slow = permutation_test(energy_distance, &a, &b, 200, 7).unwrap();
    assert!(close(fast.statistic, slow.statistic, 1e-12));
    for (x, y) in fast.null_samples.iter().zip(&slow.null_samples) {
        assert!(close(*x, *y, 1e-12));
    }
    assert_eq!(fast.p_value, slow.p_value);
    let fast = permutation_test_mmd(&a, &b, &cfg, 200, 7).unwrap();
    let slow = permutation_test(|x, y| mmd_two_sample(x, y, &cfg), &a, &b, 200, 7).unwrap();
    for (x, y) in fast.null_samples.iter().zip(&slow.null_samples) {
        assert!(close(*x, *y, 1e-12));
    }
    assert_eq!(fast.p_value, slow.p_value);
}

#[test]
fn permutation_extremes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = normal_matrix(&mut rng, 20, 2, 0.0);
    let b = normal_matrix(&mut rng, 20, 2, 10.0);
    let r = permutation_test_energy(&a, &b, 1000, 1).unwrap();
    assert_eq!(r.p_value, 1.0 / 1001.0);
    let again = permutation_test_energy(&a, &b, 1000, 1).unwrap();
    assert_eq!(r.null_samples, again.null_samples);
    assert!(permutation_test_energy(&a, &b, 99, 1).is_err());
}

#[test]
fn cliffs_examples() {
    assert_eq!(cliffs_delta(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), -1.0);
    assert_eq!(cliffs_delta(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), -0.75);
    assert_eq!(cliffs_delta(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
}

#[test]
fn mwu_examples() {
    assert_eq!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap().u, 0.0);
    let t = mann_whitney_u(&[1.0], &[1.0]).unwrap();
    assert_eq!(t.u, 0.5);
    assert_eq!(t.p, 1.0);
}

#[test]
fn mwu_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..30 {
        let n = 1 + trial % 8;
        let m = 2 + (trial * 7) % 9;
        // Coarse grid values force ties.
        let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| rng.random_range(0..6) as f64).collect()
        };
        let a = draw(&mut rng, n);
        let b = draw(&mut rng, m);
        let t = mann_whitney_u(&a, &b).unwrap();
        assert!(t.exact);
        assert!(close(t.p, brute_mwu_p(&a, &b), 1e-10), "{a:?} {b:?}");
    }
}

#[test]
fn mwu_normal_approximation_tracks_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a: Vec<f64> = (0..10).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.2).collect();
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    let approx = mann_whitney_u(&a, &b).unwrap();
    assert!(!approx.exact);
    assert!(close(approx.p, brute_mwu_p(&a, &b), 0.01));
    assert!(close(
        exact_rank_sum_p(&midranks(&pooled).0, 10).unwrap(),
        brute_mwu_p(&a, &b),
        1e-10
    ));
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + 0.15).collect();
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let exact = exact_rank_sum_p(&midranks(&pooled).0, 20).unwrap();
        assert!(close(mann_whitney_u(&a, &b).unwrap().p, exact, 0.01));
    }
}

#[test]
fn kruskal_examples() {
    let (h, p) = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
    assert!(close(h, 7.2, 1e-12));
    assert!(close(p, (-3.6f64).exp(), 1e-10));
    assert_eq!(kruskal_wallis(&[&[2.0, 2.0], &[2.0]]).unwrap(), (0.0, 1.0));
    let (h, _) = kruskal_wallis(&[&[1.0, 4.0, 2.0], &[2.0, 1.0, 4.0]]).unwrap();
    assert!(h.abs() < 1e-12);
}

#[test]
fn kruskal_two_groups_is_squared_mwu_z() {
    let a = [0.3, 1.2, 2.5, 0.7, 3.1, 1.9, 0.2, 2.2, 1.1];
    let b = [2.8, 3.3, 1.5, 4.0, 3.6, 2.9, 4.4, 0.9, 3.9, 5.0];
    let (h, _) = kruskal_wallis(&[&a, &b]).unwrap();
    let u = mann_whitney_u(&a, &b).unwrap().u;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let z = (u - n * m / 2.0) / (n * m * (n + m + 1.0) / 12.0).sqrt();
    assert!(close(h, z * z, 1e-10));
}

#[test]
fn bh_examples() {
    let q = bh_fdr(&[0.005, 0.011, 0.02, 0.04]).unwrap();
    let want = [0.02, 0.022, 0.08 / 3.0, 0.04];
    for (x, y) in q.iter().zip(want) {
        assert!(close(*x, y, 1e-12));
    }
    assert_eq!(bh_fdr(&[0.3, 0.3, 0.3]).unwrap(), vec![0.3; 3]);
    assert_eq!(bh_fdr(&[0.7]).unwrap(), vec![0.7]);
    assert!(bh_fdr(&[1.5]).is_err());
}

#[test]
fn quantile_type7() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert!(close(quantile(&v, 0.05).unwrap(), 5.95, 1e-12));
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]).unwrap(), 2.5);
}

#[test]
fn ks_detects_nonuniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    assert!(ks_uniform(&u).unwrap().1 > 0.01);
    let skew: Vec<f64> = u.iter().map(|v| v * v).collect();
    assert!(ks_uniform(&skew).unwrap().1 < 1e-6);
}

fn scores_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-5i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_enumeration((s, l) in scores_labels()) {
        prop_assume!(l.contains(&0) && l.contains(&1));
        prop_assert!(close(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l), 1e-12));
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&flipped, &l).unwrap();
        prop_assert!(close(sum, 1.0, 1e-12));
        let warped: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert!(close(roc_auc(&warped, &l).unwrap(), roc_auc(&s, &l).unwrap(), 1e-12));
    }

    #[test]
    fn cliffs_antisymmetric_and_monotone_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 1..15),
        b in prop::collection::vec(-10.0f64..10.0, 1..15),
    ) {
        let d = cliffs_delta(&a, &b).unwrap();
        prop_assert_eq!(d, -cliffs_delta(&b, &a).unwrap());
        let f = |v: &Vec<f64>| v.iter().map(|x| x.powi(3) + 2.0 * x).collect::<Vec<_>>();
        prop_assert_eq!(d, cliffs_delta(&f(&a), &f(&b)).unwrap());
        prop_assert!((-1.0..=1.0).contains(&d));
    }

    #[test]
    fn energy_matches_brute_force_and_is_nonnegative(
        n in 1usize..8, m in 1usize..8, d in 1usize..4, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_matrix(&mut rng, n, d, 0.0);
        let b = normal_matrix(&mut rng, m, d, 0.5);
        let e = energy_distance(&a, &b).unwrap();
        prop_assert!(close(e, brute_energy(&a, &b), 1e-10));
        prop_assert!(e >= -1e-12);
    }

    #[test]
    fn bh_is_monotone_and_dominates(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let q = bh_fdr(&p).unwrap();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in order.windows(2) {
            prop_assert!(q[w[0]] <= q[w[1]] + 1e-15);
        }
        for (qi, pi) in q.iter().zip(&p) {
            prop_assert!(*qi >= *pi - 1e-15 && *qi <= 1.0);
        }
    }

    #[test]
    fn mwu_u_partition(a in prop::collection::vec(-3i32..3, 1..12), b in prop::collection::vec(-3i32..3, 1..12)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ua = mann_whitney_u(&a, &b).unwrap();
        let ub = mann_whitney_u(&b, &a).unwrap();
        prop_assert!(close(ua.u + ub.u, (a.len() * b.len()) as f64, 1e-9));
        prop_assert!(close(ua.p, ub.p, 1e-12));
        prop_assert!(ua.p > 0.0 && ua.p <= 1.0);
    }
}

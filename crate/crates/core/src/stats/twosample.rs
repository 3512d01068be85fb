use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::ndmath::Tensor;
use crate::objective::MmdKernelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub statistic: f64,
    /// (1 + #{null ≥ observed}) / (1 + n_permutations).
    pub p_value: f64,
    pub n_permutations: usize,
    pub null_samples: Vec<f64>,
}

fn check_pair(a: &Tensor, b: &Tensor, min_rows: usize) -> Result<(), StatsError> {
    if a.cols() != b.cols() {
        return Err(StatsError::DimensionMismatch(a.cols(), b.cols()));
    }
    let got = a.rows().min(b.rows());
    if got < min_rows {
        return Err(StatsError::TooFew {
            what: "rows per sample",
            min: min_rows,
            got,
        });
    }
    if !(a.all_finite() && b.all_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf_mix(d2: f64, bw: &[f64]) -> f64 {
    bw.iter().map(|w| (-d2 / w).exp()).sum::<f64>() / bw.len() as f64
}

/// Pairwise kernel values over the pooled rows of `a` then `b`, upper
/// triangle only (row-major, i < j).
fn pooled_upper(a: &Tensor, b: &Tensor, f: impl Fn(f64) -> f64 + Sync) -> (usize, Vec<f64>) {
    let n = a.rows() + b.rows();
    let row = |i: usize| if i < a.rows() { a.row(i) } else { b.row(i - a.rows()) };
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| f(sq_dist(row(i), row(j)))).collect())
        .collect();
    (n, rows.concat())
}

/// Within-A, within-B and cross sums over unordered pairs.
fn group_sums(n: usize, upper: &[f64], in_a: &[bool]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let v = upper[k];
            k += 1;
            match (in_a[i], in_a[j]) {
                (true, true) => aa += v,
                (false, false) => bb += v,
                _ => ab += v,
            }
        }
    }
    (aa, bb, ab)
}

fn energy_from_sums(n: f64, m: f64, (aa, bb, ab): (f64, f64, f64)) -> f64 {
    2.0 * ab / (n * m) - 2.0 * aa / (n * n) - 2.0 * bb / (m * m)
}

fn mmd_from_sums(n: f64, m: f64, (aa, bb, ab): (f64, f64, f64)) -> f64 {
    2.0 * aa / (n * (n - 1.0)) + 2.0 * bb / (m * (m - 1.0)) - 2.0 * ab / (n * m)
}

/// Energy distance `2·E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` with every mean taken over
/// all ordered pairs (self-pairs contribute zero). Nonnegative and exactly
/// zero for identical samples.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64, StatsError> {
    check_pair(a, b, 1)?;
    let mean = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += sq_dist(x.row(i), y.row(j)).sqrt();
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    Ok(2.0 * mean(a, b) - mean(a, a) - mean(b, b))
}

/// Unbiased U-statistic MMD² with the RBF mixture used in training, bandwidths
/// scaled by the feature dimension.
pub fn mmd_two_sample(a: &Tensor, b: &Tensor, cfg: &MmdKernelConfig) -> Result<f64, StatsError> {
    check_pair(a, b, 2)?;
    let bw = cfg.bandwidths(a.cols());
    let mean = |x: &Tensor, y: &Tensor, within: bool| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                if !(within && i == j) {
                    s += rbf_mix(sq_dist(x.row(i), y.row(j)), &bw);
                }
            }
        }
        let pairs = if within {
            x.rows() * (x.rows() - 1)
        } else {
            x.rows() * y.rows()
        };
        s / pairs as f64
    };
    Ok(mean(a, a, true) + mean(b, b, true) - 2.0 * mean(a, b, false))
}

/// Shuffled pooled indices for permutation `k`; each permutation draws from
/// its own ChaCha stream so results do not depend on thread scheduling.
fn permuted(seed: u64, k: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn finish(statistic: f64, null_samples: Vec<f64>) -> PermutationTestResult {
    // Summation order differs between the observed and permuted passes, so
    // ties are judged with a relative tolerance.
    let tol = 1e-12 * statistic.abs().max(1e-300);
    let exceed = null_samples.iter().filter(|&&v| v >= statistic - tol).count();
    let n = null_samples.len();
    PermutationTestResult {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + n) as f64,
        n_permutations: n,
        null_samples,
    }
}

fn check_perms(n_perm: usize) -> Result<(), StatsError> {
    if n_perm < 100 {
        return Err(StatsError::TooFew {
            what: "permutations",
            min: 100,
            got: n_perm,
        });
    }
    Ok(())
}

/// Label-permutation test for an arbitrary two-sample statistic.
pub fn permutation_test<F>(
    statistic: F,
    a: &Tensor,
    b: &Tensor,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationTestResult, StatsError>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64, StatsError> + Sync,
{
    check_perms(n_perm)?;
    check_pair(a, b, 1)?;
    let observed = statistic(a, b)?;
    let (n, total) = (a.rows(), a.rows() + b.rows());
    let pooled = {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::matrix(total, a.cols(), data).expect("pooled shape")
    };
    let null = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let idx = permuted(seed, k, total);
            statistic(&pooled.select_rows(&idx[..n]), &pooled.select_rows(&idx[n..]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(finish(observed, null))
}

fn matrix_test(
    a: &Tensor,
    b: &Tensor,
    n_perm: usize,
    seed: u64,
    kernel: impl Fn(f64) -> f64 + Sync,
    stat: impl Fn(f64, f64, (f64, f64, f64)) -> f64 + Sync,
) -> PermutationTestResult {
    let (total, upper) = pooled_upper(a, b, kernel);
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let identity: Vec<bool> = (0..total).map(|i| i < a.rows()).collect();
    let observed = stat(n, m, group_sums(total, &upper, &identity));
    let null = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let idx = permuted(seed, k, total);
            let mut in_a = vec![false; total];
            for &i in &idx[..a.rows()] {
                in_a[i] = true;
            }
            stat(n, m, group_sums(total, &upper, &in_a))
        })
        .collect();
    finish(observed, null)
}

/// Energy-distance permutation test over a precomputed pooled distance
/// matrix. Draws the same permutations as [`permutation_test`].
pub fn permutation_test_energy(
    a: &Tensor,
    b: &Tensor,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationTestResult, StatsError> {
    check_perms(n_perm)?;
    check_pair(a, b, 1)?;
    Ok(matrix_test(a, b, n_perm, seed, f64::sqrt, energy_from_sums))
}

/// Unbiased MMD² permutation test over a precomputed pooled kernel matrix.
pub fn permutation_test_mmd(
    a: &Tensor,
    b: &Tensor,
    cfg: &MmdKernelConfig,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationTestResult, StatsError> {
    check_perms(n_perm)?;
    check_pair(a, b, 2)?;
    let bw = cfg.bandwidths(a.cols());
    Ok(matrix_test(a, b, n_perm, seed, |d2| rbf_mix(d2, &bw), mmd_from_sums))
}

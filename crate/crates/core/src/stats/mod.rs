//! Classification metrics, rank tests, effect sizes, multiple testing and
//! two-sample distribution tests.

mod twosample;

pub use twosample::{
    energy_distance, mmd_two_sample, permutation_test, permutation_test_energy,
    permutation_test_mmd, PermutationTestResult,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

/// Below this smaller-group size the Mann–Whitney p-value is exact.
pub const MWU_EXACT_MAX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite input value")]
    NonFinite,
    #[error("only one class present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("labels must be 0 or 1")]
    BadLabel,
    #[error("at least {min} {what} required, got {got}")]
    TooFew {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("value {0} is outside [0, 1]")]
    Probability(f64),
    #[error("confidence level {0} must lie in (0, 1)")]
    Level(f64),
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    check_finite(scores)?;
    if labels.iter().any(|&l| l > 1) {
        return Err(StatsError::BadLabel);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Midranks (1-based) and the tie term Σ(t³ − t) over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Linear-interpolation quantile between order statistics (type 7).
pub fn quantile(values: &[f64], p: f64) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Probability(p));
    }
    check_finite(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn median(values: &[f64]) -> Result<f64, StatsError> {
    quantile(values, 0.5)
}

/// Pearson correlation; `None` when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// P(score⁺ > score⁻) + ½·P(tie).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, StatsError> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let (ranks, _) = midranks(scores);
    let r_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = r_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: Σ (Rₖ − Rₖ₋₁)·Pₖ over distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, StatsError> {
    let (pos, _) = check_binary(scores, labels)?;
    if pos == 0 {
        return Err(StatsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += labels[order[j]] as usize;
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Percentile bootstrap interval of `metric` over sample-level resamples.
/// Resamples missing either class are redrawn.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &[f64],
    labels: &[u8],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), StatsError>
where
    F: Fn(&[f64], &[u8]) -> Result<f64, StatsError>,
{
    if n_resamples < 100 {
        return Err(StatsError::TooFew {
            what: "bootstrap resamples",
            min: 100,
            got: n_resamples,
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_resamples);
    let mut s = vec![0.0; n];
    let mut l = vec![0u8; n];
    while values.len() < n_resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let p = l.iter().filter(|&&v| v == 1).count();
        if p == 0 || p == n {
            continue;
        }
        values.push(metric(&s, &l)?);
    }
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&values, tail)?, quantile(&values, 1.0 - tail)?))
}

/// (#{a > b} − #{a < b}) / (|A|·|B|) over all pairs.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let mut s: i64 = 0;
    for x in a {
        for y in b {
            s += (x > y) as i64 - (x < y) as i64;
        }
    }
    Ok(s as f64 / (a.len() * b.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Two-sided Mann–Whitney U with midranks. Exact permutation p-value when the
/// smaller group has at most [`MWU_EXACT_MAX`] members, otherwise the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u = r_a - n * (n + 1.0) / 2.0;
    if a.len().min(b.len()) <= MWU_EXACT_MAX {
        let p = exact_rank_sum_p(&ranks, a.len())?;
        return Ok(MannWhitney { u, p, exact: true });
    }
    let big_n = n + m;
    let var = n * m / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - n * m / 2.0).abs() - 0.5) / var.sqrt();
        (2.0 * upper_normal(z)).min(1.0)
    };
    Ok(MannWhitney { u, p, exact: false })
}

fn upper_normal(z: f64) -> f64 {
    Normal::standard().sf(z)
}

/// Exact two-sided p of the rank sum of the first `n_first` entries of
/// `ranks` under random relabelling: 2·min(P(S ≤ s), P(S ≥ s)), capped at 1.
pub fn exact_rank_sum_p(ranks: &[f64], n_first: usize) -> Result<f64, StatsError> {
    let total = ranks.len();
    if n_first == 0 || n_first >= total {
        return Err(StatsError::Empty);
    }
    // Count subsets of the smaller group's size; the two tails swap roles.
    let (k, obs) = {
        let s_first: f64 = ranks[..n_first].iter().sum();
        if n_first <= total - n_first {
            (n_first, s_first)
        } else {
            (total - n_first, ranks.iter().sum::<f64>() - s_first)
        }
    };
    // Midranks are multiples of ½, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let obs2 = (2.0 * obs).round() as usize;
    let max_sum: usize = {
        let mut d = doubled.clone();
        d.sort_unstable_by(|a, b| b.cmp(a));
        d[..k].iter().sum()
    };
    let width = max_sum + 1;
    let mut ways = vec![0.0f64; (k + 1) * width];
    ways[0] = 1.0;
    for &r in &doubled {
        for c in (1..=k).rev() {
            let (lo, hi) = ways.split_at_mut(c * width);
            let prev = &lo[(c - 1) * width..];
            let cur = &mut hi[..width];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &ways[k * width..];
    let all: f64 = dist.iter().sum();
    let le: f64 = dist[..=obs2.min(max_sum)].iter().sum();
    let ge: f64 = if obs2 > max_sum { 0.0 } else { dist[obs2..].iter().sum() };
    Ok((2.0 * le.min(ge) / all).min(1.0))
}

/// Kruskal–Wallis H with tie correction; p from χ²(k − 1).
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<(f64, f64), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFew {
            what: "groups",
            min: 2,
            got: groups.len(),
        });
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(StatsError::Empty);
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    check_finite(&pooled)?;
    let n = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let mut off = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[off..off + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        off += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
    Ok((h, chi2_sf(h, (groups.len() - 1) as f64)))
}

pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).expect("positive degrees of freedom").sf(x)
}

/// Benjamini–Hochberg step-up adjusted q-values, in input order.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StatsError::Probability(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running;
    }
    Ok(q)
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1).
/// Returns (D, asymptotic p).
pub fn ks_uniform(samples: &[f64]) -> Result<(f64, f64), StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(samples)?;
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_sf(lambda)))
}

fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=200 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        s += if j as usize % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::CohortError;
use crate::ndmath::Tensor;
use crate::stats::pearson;

/// One agglomeration step. Ids below N are samples; step s creates id N + s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster label per sample, contiguous from 1, numbered by descending
    /// cluster size.
    pub labels: Vec<usize>,
    pub merges: Vec<Merge>,
    pub threshold: f64,
    /// Samples whose standardized latent vector was constant.
    pub constant_samples: Vec<usize>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Column-wise z-score (population standard deviation); constant columns
/// become zero.
pub fn standardize_columns(values: &Tensor) -> Tensor {
    let (n, d) = (values.rows(), values.cols());
    let mut out = values.clone();
    for j in 0..d {
        let col = values.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let z = if sd > 0.0 { (col[i] - mean) / sd } else { 0.0 };
            out.set2(i, j, z);
        }
    }
    out
}

/// `1 − Pearson(row_i, row_j)`. Identical rows are at distance 0; otherwise a
/// row with undefined correlation sits at distance 1. Returns the matrix and
/// the constant rows.
pub fn correlation_distance(values: &Tensor) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = values.rows();
    let mut d = vec![vec![0.0; n]; n];
    let constant: Vec<usize> = (0..n)
        .filter(|&i| {
            let r = values.row(i);
            r.iter().all(|v| *v == r[0])
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let v = if values.row(i) == values.row(j) {
                0.0
            } else {
                pearson(values.row(i), values.row(j)).map_or(1.0, |r| 1.0 - r)
            };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    (d, constant)
}

/// Average-linkage (UPGMA) agglomeration. Ties go to the lowest slot pair.
pub fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut active: Vec<bool> = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (dist_ij, i, j) = best;
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let v = (si * d[i][k] + sj * d[j][k]) / (si + sj);
                d[i][k] = v;
                d[k][i] = v;
            }
        }
        active[j] = false;
        size[i] += size[j];
        merges.push(Merge {
            left: id[i].min(id[j]),
            right: id[i].max(id[j]),
            distance: dist_ij,
            size: size[i],
        });
        id[i] = n + step;
    }
    merges
}

/// Flat clusters from merges at distance ≤ `threshold`, labelled 1.. by
/// descending size, ties broken by smallest member index.
pub fn cut_tree(n: usize, merges: &[Merge], threshold: f64) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n + merges.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (s, m) in merges.iter().enumerate() {
        if m.distance <= threshold {
            let node = n + s;
            let a = find(&mut parent, m.left);
            let b = find(&mut parent, m.right);
            parent[a] = node;
            parent[b] = node;
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut groups: Vec<(usize, usize, usize)> = Vec::new(); // (size, first, root)
    for (i, &r) in roots.iter().enumerate() {
        match groups.iter_mut().find(|g| g.2 == r) {
            Some(g) => g.0 += 1,
            None => groups.push((1, i, r)),
        }
    }
    groups.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    roots
        .iter()
        .map(|r| groups.iter().position(|g| g.2 == *r).expect("root") + 1)
        .collect()
}

/// Standardize latents, build 1 − Pearson distances between samples, cluster
/// with average linkage and cut at `threshold`.
pub fn correlation_cluster(values: &Tensor, threshold: f64) -> Result<ClusterAssignment, CohortError> {
    if values.rows() < 2 || values.cols() == 0 {
        return Err(CohortError::Shape(format!(
            "clustering needs at least 2 samples and 1 latent, got {}x{}",
            values.rows(),
            values.cols()
        )));
    }
    if !values.all_finite() {
        return Err(CohortError::NonFinite);
    }
    let z = standardize_columns(values);
    let (dist, constant_samples) = correlation_distance(&z);
    let merges = average_linkage(&dist);
    let labels = cut_tree(values.rows(), &merges, threshold);
    Ok(ClusterAssignment {
        labels,
        merges,
        threshold,
        constant_samples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdsResult {
    /// `[N, dims]` coordinates.
    pub coords: Tensor,
    /// Leading eigenvalues of the double-centred matrix, before clamping.
    pub eigenvalues: Vec<f64>,
    /// How many of the leading eigenvalues were negative and set to zero.
    pub clamped: usize,
}

/// Classical (Torgerson) MDS: eigendecomposition of `−½ J D² J`.
pub fn classical_mds(dist: &[Vec<f64>], dims: usize) -> Result<MdsResult, CohortError> {
    let n = dist.len();
    if n == 0 || dist.iter().any(|r| r.len() != n) {
        return Err(CohortError::Shape("distance matrix must be square and non-empty".into()));
    }
    for i in 0..n {
        if dist[i][i] != 0.0 {
            return Err(CohortError::Shape("distance matrix needs a zero diagonal".into()));
        }
        for j in 0..n {
            if !dist[i][j].is_finite() {
                return Err(CohortError::NonFinite);
            }
            if (dist[i][j] - dist[j][i]).abs() > 1e-12 * dist[i][j].abs().max(1.0) {
                return Err(CohortError::Shape("distance matrix must be symmetric".into()));
            }
        }
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| dist[i][j] * dist[i][j]);
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut coords = Tensor::zeros(&[n, dims]);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut clamped = 0;
    for (c, &k) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[k];
        eigenvalues.push(lambda);
        if lambda < 0.0 {
            clamped += 1;
        }
        let scale = lambda.max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..n).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords.set2(i, c, sign * v[i] * scale);
        }
    }
    Ok(MdsResult {
        coords,
        eigenvalues,
        clamped,
    })
}

/// Euclidean distances between the rows of `points`.
pub fn euclidean_distances(points: &Tensor) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Kruskal stress-1 of `coords` against target distances:
/// √(Σ(d̂ − d)² / Σd²).
pub fn relative_stress(target: &[Vec<f64>], coords: &Tensor) -> f64 {
    let fitted = euclidean_distances(coords);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..target.len() {
        for j in i + 1..target.len() {
            num += (fitted[i][j] - target[i][j]).powi(2);
            den += target[i][j].powi(2);
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table = std::collections::BTreeMap::<(usize, usize), usize>::new();
    let mut ra = std::collections::BTreeMap::<usize, usize>::new();
    let mut rb = std::collections::BTreeMap::<usize, usize>::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |k: usize| (k * k.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&k| c2(k)).sum();
    let sa: f64 = ra.values().map(|&k| c2(k)).sum();
    let sb: f64 = rb.values().map(|&k| c2(k)).sum();
    let expected = sa * sb / c2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

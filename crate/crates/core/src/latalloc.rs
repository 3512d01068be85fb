//! Latent dimensionality per encoder factor.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{write_atomic, DataError};
use crate::maskspec::MaskSet;
use crate::ndmath::Tensor;

/// Kneedle sensitivity.
pub const KNEEDLE_S: f64 = 1.0;

/// Minimum peak of the Kneedle difference curve for a PCA spectrum to count
/// as having an elbow. Normalization makes any spectrum span [0, 1], so noise
/// alone still produces a mid-curve "knee"; its peak stays well below this.
pub const ELBOW_MIN_STRENGTH: f64 = 0.45;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("K_target = {k} is smaller than the number of factors {b}")]
    TooFewLatents { k: usize, b: usize },
    #[error("knee_locate needs at least 3 points, got {0}")]
    ShortCurve(usize),
    #[error("PCA needs at least 2 samples and 1 feature, got {n}×{d}")]
    PcaShape { n: usize, d: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAllocation {
    pub names: Vec<String>,
    pub j: Vec<usize>,
}

impl LatentAllocation {
    pub fn k(&self) -> usize {
        self.j.iter().sum()
    }

    /// Column range of each factor inside the concatenated latent vector.
    pub fn offsets(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.j
            .iter()
            .map(|&j| {
                let r = start..start + j;
                start += j;
                r
            })
            .collect()
    }

    pub fn export(&self, path: &Path) -> Result<(), AllocError> {
        let body = serde_json::json!({
            "K": self.k(),
            "entries": self.names.iter().zip(&self.j)
                .map(|(n, j)| serde_json::json!({"name": n, "j": j}))
                .collect::<Vec<_>>(),
        });
        let s = serde_json::to_string_pretty(&body).expect("allocation serializes");
        Ok(write_atomic(path, s.as_bytes())?)
    }
}

/// Splits `k_target` latents proportionally to `sizes`, at least one each.
///
/// Factors whose quota is below one are pinned at one and the rest is
/// re-apportioned among the others; the final step is largest remainder with
/// ties to the lower index.
pub fn allocate_proportional(sizes: &[usize], k_target: usize) -> Result<Vec<usize>, AllocError> {
    let b = sizes.len();
    if k_target < b {
        return Err(AllocError::TooFewLatents { k: k_target, b });
    }
    let mut pinned = vec![false; b];
    loop {
        let free: Vec<usize> = (0..b).filter(|&i| !pinned[i]).collect();
        let budget = k_target - (b - free.len());
        let mass: f64 = free.iter().map(|&i| sizes[i] as f64).sum();
        let quota = |i: usize| {
            if mass > 0.0 {
                budget as f64 * sizes[i] as f64 / mass
            } else {
                budget as f64 / free.len() as f64
            }
        };
        let newly: Vec<usize> = free.iter().copied().filter(|&i| quota(i) < 1.0).collect();
        if !newly.is_empty() && newly.len() < free.len() {
            for i in newly {
                pinned[i] = true;
            }
            continue;
        }
        let mut j = vec![1usize; b];
        if free.is_empty() {
            return Ok(j);
        }
        let fr: Vec<f64> = free.iter().map(|&i| quota(i) / budget as f64).collect();
        let counts = crate::datamodel::apportion(budget, &fr);
        for (c, &i) in counts.into_iter().zip(&free) {
            j[i] = c.max(1);
        }
        // Only reachable when every free quota was below one.
        let mut total: usize = j.iter().sum();
        let mut order = free.clone();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(order.len() * k_target) {
            if total <= k_target {
                break;
            }
            if j[i] > 1 {
                j[i] -= 1;
                total -= 1;
            }
        }
        return Ok(j);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaSpectrum {
    /// Explained-variance ratios, descending.
    pub ratios: Vec<f64>,
    pub zero_variance: bool,
}

/// Explained-variance ratios of the column-centered data (covariance with
/// 1/(N−1)); uses the smaller of the d×d covariance and the N×N Gram matrix.
pub fn pca_explained_variance(data: &Tensor) -> Result<PcaSpectrum, AllocError> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 || d < 1 || data.rank() != 2 {
        return Err(AllocError::PcaShape { n, d });
    }
    let mut centered = DMatrix::from_row_slice(n, d, data.data());
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let cov = if d <= n {
        centered.transpose() * &centered * scale
    } else {
        &centered * centered.transpose() * scale
    };
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.truncate((n - 1).min(d));
    let total: f64 = eig.iter().sum();
    let max = eig.first().copied().unwrap_or(0.0);
    if !(total > 0.0) || max <= 1e-12 * d as f64 {
        return Ok(PcaSpectrum {
            ratios: vec![1.0],
            zero_variance: true,
        });
    }
    Ok(PcaSpectrum {
        ratios: eig.iter().map(|v| v / total).collect(),
        zero_variance: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knee {
    /// 1-based position on the curve.
    pub x: usize,
    pub found: bool,
    /// Peak of the difference curve.
    pub strength: f64,
}

/// Kneedle for a decreasing convex curve sampled at x = 1..n.
///
/// With both axes scaled to [0, 1], the difference curve is
/// `(1 − y_norm) − x_norm`; the knee is its first maximum. A peak no higher
/// than S/(n−1) can never be confirmed by Kneedle's threshold, so it is
/// reported as "no knee" at x = 1.
pub fn knee_locate(y: &[f64]) -> Result<Knee, AllocError> {
    let n = y.len();
    if n < 3 {
        return Err(AllocError::ShortCurve(n));
    }
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let none = Knee {
        x: 1,
        found: false,
        strength: 0.0,
    };
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(none);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &v) in y.iter().enumerate() {
        let diff = (1.0 - (v - lo) / range) - i as f64 / (n - 1) as f64;
        if diff > best.1 + 1e-12 {
            best = (i, diff);
        }
    }
    if best.1 <= KNEEDLE_S / (n - 1) as f64 {
        return Ok(Knee {
            strength: best.1.max(0.0),
            ..none
        });
    }
    Ok(Knee {
        x: best.0 + 1,
        found: true,
        strength: best.1,
    })
}

/// Latents for one masked subset: the components preceding the spectrum's
/// elbow. Kneedle marks the first point of the flat tail, so a rank-r signal
/// has its knee at r + 1.
pub fn elbow_latents(subset: &Tensor) -> Result<usize, AllocError> {
    let spec = pca_explained_variance(subset)?;
    if spec.zero_variance || spec.ratios.len() < 3 {
        return Ok(1);
    }
    let knee = knee_locate(&spec.ratios)?;
    if !knee.found || knee.strength < ELBOW_MIN_STRENGTH {
        return Ok(1);
    }
    Ok((knee.x - 1).max(1))
}

/// Elbow rule per mask entry on the given (training) rows.
pub fn allocate_elbow(values: &Tensor, masks: &MaskSet, rows: &[usize]) -> Result<Vec<usize>, AllocError> {
    let sub = values.select_rows(rows);
    masks
        .entries
        .iter()
        .map(|e| {
            if e.indices.len() <= 1 {
                Ok(1)
            } else {
                elbow_latents(&sub.select_cols(&e.indices))
            }
        })
        .collect()
}

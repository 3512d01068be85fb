//! Training loss: reconstruction (MSE on continuous columns, BCE on binary
//! ones), multi-bandwidth RBF MMD between latents and an isotropic Gaussian
//! prior, and logit-space BCE for the response head.
//!
//! Every term exists twice: as a plain function on tensors (for reporting and
//! as an oracle) and as graph nodes (for training).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdvae::ForwardResult;
use crate::datamodel::ValueKind;
use crate::ndmath::{Graph, NodeId, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DEFAULT_BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss weights must be nonnegative, finite and not all zero: {0:?}")]
    Weights([f64; 3]),
    #[error("MMD needs at least one positive bandwidth")]
    Bandwidths,
    #[error("MMD needs at least two samples on each side, got {0} and {1}")]
    TooFewSamples(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub mmd: f64,
    pub resp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            mmd: 1.0,
            resp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [self.rec, self.mmd, self.resp];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(LossError::Weights(w));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

/// RBF mixture; bandwidth σ² = latent_dim × scale for each scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdKernelConfig {
    pub scales: Vec<f64>,
    pub estimator: MmdEstimator,
}

impl Default for MmdKernelConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_BANDWIDTH_SCALES.to_vec(),
            estimator: MmdEstimator::Biased,
        }
    }
}

impl MmdKernelConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(LossError::Bandwidths);
        }
        Ok(())
    }

    pub fn bandwidths(&self, dim: usize) -> Vec<f64> {
        self.scales.iter().map(|s| s * dim as f64).collect()
    }
}

fn columns_of(kinds: &[ValueKind], kind: ValueKind) -> Vec<usize> {
    (0..kinds.len()).filter(|&j| kinds[j] == kind).collect()
}

/// Batch-mean MSE over continuous columns plus batch-mean BCE over binary
/// columns. Each group is averaged over its own cells.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor, kinds: &[ValueKind]) -> f64 {
    let n = x.rows();
    let mut mse = 0.0;
    let mut bce = 0.0;
    let cont = columns_of(kinds, ValueKind::Continuous);
    let bin = columns_of(kinds, ValueKind::Binary);
    for i in 0..n {
        for &j in &cont {
            mse += (x.get2(i, j) - x_hat.get2(i, j)).powi(2);
        }
        for &j in &bin {
            let p = x_hat.get2(i, j).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = x.get2(i, j);
            bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
    }
    let mut total = 0.0;
    if !cont.is_empty() {
        total += mse / (n * cont.len()) as f64;
    }
    if !bin.is_empty() {
        total += bce / (n * bin.len()) as f64;
    }
    total
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean(a: &Tensor, b: &Tensor, bw: &[f64], skip_diagonal: bool) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..m {
            if skip_diagonal && i == j {
                continue;
            }
            let d = sq_dist(a.row(i), b.row(j));
            s += bw.iter().map(|w| (-d / w).exp()).sum::<f64>() / bw.len() as f64;
            count += 1;
        }
    }
    s / count as f64
}

/// Multi-kernel MMD² between latent codes and prior draws.
pub fn mmd_to_prior(z: &Tensor, prior: &Tensor, cfg: &MmdKernelConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    if z.rows() < 2 || prior.rows() < 2 {
        return Err(LossError::TooFewSamples(z.rows(), prior.rows()));
    }
    let bw = cfg.bandwidths(z.cols());
    let within = cfg.estimator == MmdEstimator::Unbiased;
    Ok(kernel_mean(z, z, &bw, within) + kernel_mean(prior, prior, &bw, within)
        - 2.0 * kernel_mean(z, prior, &bw, false))
}

/// Stable logit-space BCE, averaged over the batch.
pub fn supervised_bce(logits: &[f64], y: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
        .sum();
    s / logits.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub mmd: f64,
    pub resp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(rec: f64, mmd: f64, resp: f64, w: &LossWeights) -> Self {
        Self {
            rec,
            mmd,
            resp,
            total: w.rec * rec + w.mmd * mmd + w.resp * resp,
        }
    }
}

pub fn total_loss(
    x: &Tensor,
    fwd: &ForwardResult,
    y: &[f64],
    weights: &LossWeights,
    prior: &Tensor,
    cfg: &MmdKernelConfig,
    kinds: &[ValueKind],
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let rec = reconstruction_loss(x, &fwd.x_hat, kinds);
    let mmd = mmd_to_prior(&fwd.z, prior, cfg)?;
    let resp = supervised_bce(fwd.logit.data(), y);
    Ok(LossBreakdown::combine(rec, mmd, resp, weights))
}

/// Loss nodes added on top of a forward graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub rec: NodeId,
    pub mmd: NodeId,
    pub resp: NodeId,
    pub total: NodeId,
}

pub const PRIOR_LEAF: &str = "prior";
pub const TARGET_LEAF: &str = "y";

/// Appends the weighted loss to `g`. Adds input leaves `prior` `[m, K]` and
/// `y` `[B, 1]`; the MMD term is always the biased V-statistic so it stays
/// nonnegative and smooth.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    g: &mut Graph,
    x: NodeId,
    x_hat: NodeId,
    z: NodeId,
    logit: NodeId,
    kinds: &[ValueKind],
    latent_dim: usize,
    weights: &LossWeights,
    cfg: &MmdKernelConfig,
) -> LossNodes {
    let zero = || Tensor::scalar(0.0);
    let mut rec_terms = Vec::new();
    let cont = columns_of(kinds, ValueKind::Continuous);
    if !cont.is_empty() {
        let xc = g.gather(x, cont.clone());
        let hc = g.gather(x_hat, cont);
        let d = g.sub(xc, hc);
        let sq = g.square(d);
        rec_terms.push(g.mean(sq));
    }
    let bin = columns_of(kinds, ValueKind::Binary);
    if !bin.is_empty() {
        let xb = g.gather(x, bin.clone());
        let hb = g.gather(x_hat, bin);
        let p = g.clamp(hb, BCE_CLAMP, 1.0 - BCE_CLAMP);
        let lp = g.log(p);
        let q = g.affine(p, -1.0, 1.0);
        let lq = g.log(q);
        let t_not = g.affine(xb, -1.0, 1.0);
        let a = g.mul(xb, lp);
        let b = g.mul(t_not, lq);
        let s = g.add(a, b);
        let m = g.mean(s);
        rec_terms.push(g.scale(m, -1.0));
    }
    let rec = match rec_terms.len() {
        0 => g.constant(zero()),
        1 => rec_terms[0],
        _ => g.add(rec_terms[0], rec_terms[1]),
    };
    let rec = g.label(rec, "loss.rec");

    let prior = g.input(PRIOR_LEAF);
    let dzz = g.pairwise_sq_dist(z, z);
    let dpp = g.pairwise_sq_dist(prior, prior);
    let dzp = g.pairwise_sq_dist(z, prior);
    let bws = cfg.bandwidths(latent_dim);
    let mut mmd_terms = Vec::new();
    for bw in &bws {
        let mut kmean = |d: NodeId| {
            let e = g.affine(d, -1.0 / bw, 0.0);
            let k = g.exp(e);
            g.mean(k)
        };
        let (kzz, kpp, kzp) = (kmean(dzz), kmean(dpp), kmean(dzp));
        let s = g.add(kzz, kpp);
        let cross = g.scale(kzp, 2.0);
        mmd_terms.push(g.sub(s, cross));
    }
    let mut mmd = mmd_terms[0];
    for &t in &mmd_terms[1..] {
        mmd = g.add(mmd, t);
    }
    let mmd = g.scale(mmd, 1.0 / bws.len() as f64);
    let mmd = g.label(mmd, "loss.mmd");

    let y = g.input(TARGET_LEAF);
    let bce = g.bce_with_logits(logit, y);
    let resp = g.mean(bce);
    let resp = g.label(resp, "loss.resp");

    let wr = g.scale(rec, weights.rec);
    let wm = g.scale(mmd, weights.mmd);
    let wc = g.scale(resp, weights.resp);
    let s = g.add(wr, wm);
    let total = g.add(s, wc);
    let total = g.label(total, "loss.total");
    g.set_output(total);
    LossNodes {
        rec,
        mmd,
        resp,
        total,
    }
}

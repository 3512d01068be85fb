//! Post-training cohort analysis over the learned latents: significance
//! screening, correlation clustering, MDS, pathway activity, survival,
//! misaligned samples, permutation importance and attribution tests.

mod cluster;
mod survival;

pub use cluster::{
    adjusted_rand_index, average_linkage, classical_mds, correlation_cluster, correlation_distance,
    cut_tree, euclidean_distances, relative_stress, standardize_columns, ClusterAssignment,
    MdsResult, Merge,
};
pub use survival::{km_estimator, logrank_test, KmCurve, KmPoint, LogRank, SurvivalRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdvae::{BdvaeModel, ModelError};
use crate::datamodel::SampleRecord;
use crate::ndmath::Tensor;
use crate::stats::{
    bh_fdr, cliffs_delta, kruskal_wallis, mann_whitney_u, median, quantile, roc_auc, MannWhitney,
    StatsError,
};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("no {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("threshold `{name}` = {value} must lie in {range}")]
    Threshold {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Decision thresholds of the downstream analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisThresholds {
    pub fdr: f64,
    pub activity: f64,
    pub delta_gene: f64,
    pub delta_bold: f64,
    pub delta_star: f64,
    pub misalign_low: f64,
    pub misalign_high: f64,
    pub cluster_cut: f64,
}

impl Default for AnalysisThresholds {
    fn default() -> Self {
        Self {
            fdr: 0.05,
            activity: 0.03,
            delta_gene: 0.33,
            delta_bold: 0.47,
            delta_star: 0.7,
            misalign_low: 0.05,
            misalign_high: 0.95,
            cluster_cut: 1.0,
        }
    }
}

impl AnalysisThresholds {
    pub fn validate(&self) -> Result<(), CohortError> {
        let open01 = |name, value: f64| {
            if value > 0.0 && value < 1.0 {
                Ok(())
            } else {
                Err(CohortError::Threshold {
                    name,
                    value,
                    range: "(0, 1)",
                })
            }
        };
        open01("fdr", self.fdr)?;
        open01("delta_gene", self.delta_gene)?;
        open01("delta_bold", self.delta_bold)?;
        open01("delta_star", self.delta_star)?;
        open01("misalign_low", self.misalign_low)?;
        open01("misalign_high", self.misalign_high)?;
        if !(self.activity >= 0.0 && self.activity.is_finite()) {
            return Err(CohortError::Threshold {
                name: "activity",
                value: self.activity,
                range: "[0, ∞)",
            });
        }
        if !(self.cluster_cut > 0.0 && self.cluster_cut <= 2.0) {
            return Err(CohortError::Threshold {
                name: "cluster_cut",
                value: self.cluster_cut,
                range: "(0, 2]",
            });
        }
        if self.misalign_low >= self.misalign_high {
            return Err(CohortError::Threshold {
                name: "misalign_low",
                value: self.misalign_low,
                range: "below misalign_high",
            });
        }
        Ok(())
    }
}

/// Posterior means per sample, one column per latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub sample_ids: Vec<String>,
    pub latent_names: Vec<String>,
    pub values: Tensor,
}

impl LatentEmbedding {
    pub fn new(sample_ids: Vec<String>, latent_names: Vec<String>, values: Tensor) -> Result<Self, CohortError> {
        if values.rank() != 2 || values.rows() != sample_ids.len() || values.cols() != latent_names.len() {
            return Err(CohortError::Shape(format!(
                "embedding of shape {:?} does not match {} samples x {} latents",
                values.shape(),
                sample_ids.len(),
                latent_names.len()
            )));
        }
        if !values.all_finite() {
            return Err(CohortError::NonFinite);
        }
        Ok(Self {
            sample_ids,
            latent_names,
            values,
        })
    }

    pub fn select_latents(&self, cols: &[usize]) -> Self {
        Self {
            sample_ids: self.sample_ids.clone(),
            latent_names: cols.iter().map(|&c| self.latent_names[c].clone()).collect(),
            values: self.values.select_cols(cols),
        }
    }

    /// Factor name of each latent (`name.index` → `name`).
    pub fn factor_of(&self, col: usize) -> &str {
        let n = &self.latent_names[col];
        n.rsplit_once('.').map_or(n.as_str(), |(f, _)| f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScreen {
    pub latent: String,
    pub u: f64,
    pub p: f64,
    pub q: f64,
    pub retained: bool,
}

/// Mann–Whitney responders vs non-responders per latent, BH-adjusted; keeps
/// latents with q < `fdr`.
pub fn screen_latents(emb: &LatentEmbedding, labels: &[u8], fdr: f64) -> Result<Vec<LatentScreen>, CohortError> {
    if labels.len() != emb.values.rows() {
        return Err(CohortError::Shape("labels do not match embedding rows".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(StatsError::SingleClass.into());
    }
    let tests: Vec<MannWhitney> = (0..emb.values.cols())
        .into_par_iter()
        .map(|k| {
            let col = emb.values.column(k);
            let a: Vec<f64> = pos.iter().map(|&i| col[i]).collect();
            let b: Vec<f64> = neg.iter().map(|&i| col[i]).collect();
            mann_whitney_u(&a, &b)
        })
        .collect::<Result<_, _>>()?;
    let p: Vec<f64> = tests.iter().map(|t| t.p).collect();
    let q = bh_fdr(&p)?;
    Ok(tests
        .iter()
        .enumerate()
        .map(|(k, t)| LatentScreen {
            latent: emb.latent_names[k].clone(),
            u: t.u,
            p: t.p,
            q: q[k],
            retained: q[k] < fdr,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub label: usize,
    /// `C{label}-R`, `C{label}-NR` or `C{label}-Mixed`.
    pub name: String,
    pub size: usize,
    pub responder_fraction: f64,
}

/// Role names from responder fraction: at least 2/3 responders is `R`, at
/// most 1/3 is `NR`, otherwise `Mixed`.
pub fn summarize_clusters(assign: &ClusterAssignment, labels: &[u8]) -> Vec<ClusterSummary> {
    (1..=assign.n_clusters())
        .map(|c| {
            let members = assign.members(c);
            let frac = members.iter().filter(|&&i| labels[i] == 1).count() as f64 / members.len() as f64;
            let role = if frac >= 2.0 / 3.0 {
                "R"
            } else if frac <= 1.0 / 3.0 {
                "NR"
            } else {
                "Mixed"
            };
            ClusterSummary {
                label: c,
                name: format!("C{c}-{role}"),
                size: members.len(),
                responder_fraction: frac,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwayActivity {
    pub pathway: String,
    /// Median standardized activation per cluster, indexed by label − 1.
    pub medians: Vec<f64>,
    pub max_difference: f64,
    pub retained: bool,
    /// Cliff's δ of the highest-median cluster against the lowest.
    pub delta: f64,
    pub high_cluster: usize,
    pub low_cluster: usize,
    pub bold: bool,
    pub star: bool,
}

/// Per pathway and cluster, the median over (member samples × pathway
/// latents) of column-standardized activations.
pub fn pathway_activity(
    emb: &LatentEmbedding,
    pathways: &[(String, Vec<usize>)],
    clusters: &[usize],
    th: &AnalysisThresholds,
) -> Result<Vec<PathwayActivity>, CohortError> {
    if clusters.len() != emb.values.rows() {
        return Err(CohortError::Shape("cluster labels do not match embedding rows".into()));
    }
    let n_clusters = clusters.iter().copied().max().unwrap_or(0);
    if n_clusters == 0 || clusters.contains(&0) {
        return Err(CohortError::Shape("cluster labels must start at 1".into()));
    }
    let z = standardize_columns(&emb.values);
    pathways
        .par_iter()
        .map(|(name, cols)| {
            if cols.is_empty() {
                return Err(CohortError::Empty("latents for pathway"));
            }
            let pooled: Vec<Vec<f64>> = (1..=n_clusters)
                .map(|c| {
                    (0..clusters.len())
                        .filter(|&i| clusters[i] == c)
                        .flat_map(|i| cols.iter().map(move |&k| (i, k)))
                        .map(|(i, k)| z.get2(i, k))
                        .collect()
                })
                .collect();
            let medians: Vec<f64> = pooled.iter().map(|v| median(v)).collect::<Result<_, _>>()?;
            let hi = (0..n_clusters).fold(0, |b, c| if medians[c] > medians[b] { c } else { b });
            let lo = (0..n_clusters).fold(0, |b, c| if medians[c] < medians[b] { c } else { b });
            let max_difference = medians[hi] - medians[lo];
            let delta = if hi == lo { 0.0 } else { cliffs_delta(&pooled[hi], &pooled[lo])? };
            Ok(PathwayActivity {
                pathway: name.clone(),
                medians,
                max_difference,
                retained: max_difference > th.activity,
                delta,
                high_cluster: hi + 1,
                low_cluster: lo + 1,
                bold: delta.abs() > th.delta_bold,
                star: delta.abs() > th.delta_star,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagTest {
    /// U of the flagged samples against the rest of their class.
    pub u: f64,
    pub p: f64,
    pub n_flagged: usize,
    pub n_rest: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MisalignedReport {
    pub responder_threshold: Option<f64>,
    pub nonresponder_threshold: Option<f64>,
    pub responders: Vec<String>,
    pub nonresponders: Vec<String>,
    pub responder_test: Option<FlagTest>,
    pub nonresponder_test: Option<FlagTest>,
    pub warnings: Vec<String>,
}

/// Responders with PFS below their class's low quantile and non-responders
/// above their class's high quantile (type-7 quantiles, strict inequality),
/// each followed by a Mann–Whitney test of flagged vs remaining PFS.
pub fn misaligned_samples(
    records: &[SampleRecord],
    low: f64,
    high: f64,
) -> Result<MisalignedReport, CohortError> {
    let mut report = MisalignedReport::default();
    for (class, name) in [(1u8, "responders"), (0u8, "non-responders")] {
        let members: Vec<(&str, f64)> = records
            .iter()
            .filter(|r| r.response == class)
            .filter_map(|r| r.pfs_time.map(|t| (r.sample_id.as_str(), t)))
            .collect();
        if members.len() < 3 {
            report
                .warnings
                .push(format!("{name}: {} samples with PFS, skipped", members.len()));
            continue;
        }
        let pfs: Vec<f64> = members.iter().map(|m| m.1).collect();
        let (threshold, flagged): (f64, Vec<bool>) = if class == 1 {
            let t = quantile(&pfs, low)?;
            (t, pfs.iter().map(|&v| v < t).collect())
        } else {
            let t = quantile(&pfs, high)?;
            (t, pfs.iter().map(|&v| v > t).collect())
        };
        let ids: Vec<String> = members
            .iter()
            .zip(&flagged)
            .filter(|(_, &f)| f)
            .map(|(m, _)| m.0.to_string())
            .collect();
        let a: Vec<f64> = pfs.iter().zip(&flagged).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
        let b: Vec<f64> = pfs.iter().zip(&flagged).filter(|(_, &f)| !f).map(|(v, _)| *v).collect();
        let test = if a.is_empty() || b.is_empty() {
            None
        } else {
            let t = mann_whitney_u(&a, &b)?;
            Some(FlagTest {
                u: t.u,
                p: t.p,
                n_flagged: a.len(),
                n_rest: b.len(),
            })
        };
        if class == 1 {
            report.responder_threshold = Some(threshold);
            report.responders = ids;
            report.responder_test = test;
        } else {
            report.nonresponder_threshold = Some(threshold);
            report.nonresponders = ids;
            report.nonresponder_test = test;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub base_auc: f64,
    /// Mean AUC drop per latent column.
    pub drops: Vec<f64>,
}

fn permuted_column_auc(
    model: &BdvaeModel,
    mu: &Tensor,
    labels: &[u8],
    cols: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64, CohortError> {
    let mut z = mu.clone();
    for &k in cols {
        let mut col = mu.column(k);
        col.shuffle(rng);
        for (i, v) in col.into_iter().enumerate() {
            z.set2(i, k, v);
        }
    }
    Ok(roc_auc(&model.classify(&z), labels)?)
}

/// AUC drop of the classifier on z = μ when one latent column is shuffled,
/// averaged over `repeats` shuffles. Each latent draws from its own stream.
pub fn permutation_importance(
    model: &BdvaeModel,
    x: &Tensor,
    labels: &[u8],
    repeats: usize,
    seed: u64,
) -> Result<Importance, CohortError> {
    let (mu, _) = model.encode(x)?;
    let base_auc = roc_auc(&model.classify(&mu), labels)?;
    let drops = (0..mu.cols())
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut s = 0.0;
            for _ in 0..repeats.max(1) {
                s += permuted_column_auc(model, &mu, labels, &[k], &mut rng)?;
            }
            Ok(base_auc - s / repeats.max(1) as f64)
        })
        .collect::<Result<_, CohortError>>()?;
    Ok(Importance { base_auc, drops })
}

/// AUC with every latent column shuffled independently.
pub fn all_latents_permuted_auc(model: &BdvaeModel, x: &Tensor, labels: &[u8], seed: u64) -> Result<f64, CohortError> {
    let (mu, _) = model.encode(x)?;
    let cols: Vec<usize> = (0..mu.cols()).collect();
    permuted_column_auc(model, &mu, labels, &cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub feature: String,
    pub h: f64,
    pub p: f64,
    pub q: f64,
    /// Cliff's δ of the highest-median cluster against the lowest.
    pub delta: f64,
    pub high_cluster: usize,
    pub low_cluster: usize,
    pub large: bool,
}

/// Per feature: Kruskal–Wallis of attributions across clusters, BH-adjusted,
/// with Cliff's δ between the extreme-median clusters. `large` marks
/// q < fdr and |δ| > delta_gene.
pub fn attribution_tests(
    attributions: &Tensor,
    features: &[String],
    clusters: &[usize],
    th: &AnalysisThresholds,
) -> Result<Vec<FeatureAttribution>, CohortError> {
    if attributions.rows() != clusters.len() || attributions.cols() != features.len() {
        return Err(CohortError::Shape("attribution matrix does not match inputs".into()));
    }
    let n_clusters = clusters.iter().copied().max().unwrap_or(0);
    if n_clusters < 2 {
        return Err(CohortError::Shape("attribution tests need at least two clusters".into()));
    }
    let rows: Vec<(f64, f64, f64, usize, usize)> = (0..features.len())
        .into_par_iter()
        .map(|j| {
            let col = attributions.column(j);
            let groups: Vec<Vec<f64>> = (1..=n_clusters)
                .map(|c| (0..col.len()).filter(|&i| clusters[i] == c).map(|i| col[i]).collect())
                .collect();
            let refs: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
            let (h, p) = kruskal_wallis(&refs)?;
            let med: Vec<f64> = groups.iter().map(|g| median(g)).collect::<Result<_, _>>()?;
            let hi = (0..n_clusters).fold(0, |b, c| if med[c] > med[b] { c } else { b });
            let lo = (0..n_clusters).fold(0, |b, c| if med[c] < med[b] { c } else { b });
            let delta = if hi == lo { 0.0 } else { cliffs_delta(&groups[hi], &groups[lo])? };
            Ok((h, p, delta, hi + 1, lo + 1))
        })
        .collect::<Result<_, CohortError>>()?;
    let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let q = bh_fdr(&p)?;
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(j, (h, p, delta, hi, lo))| FeatureAttribution {
            feature: features[j].clone(),
            h,
            p,
            q: q[j],
            delta,
            high_cluster: hi,
            low_cluster: lo,
            large: q[j] < th.fdr && delta.abs() > th.delta_gene,
        })
        .collect())
}

#[cfg(test)]
mod tests;

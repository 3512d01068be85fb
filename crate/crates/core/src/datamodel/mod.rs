//! Cohort ingestion: the samples × features matrix, clinical labels,
//! train-only standardization, stratified splitting and sample-level WES
//! feature derivation.

mod io;
mod split;
mod wes;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::Tensor;

pub use io::{
    load_feature_matrix, load_labels, read_schema, write_atomic, write_feature_matrix,
    write_labels, write_schema, FeatureSchema, RawLabel, SchemaEntry,
};
pub use io::format_value;
pub use split::{apportion, stratified_split, SplitFractions, SplitOutcome};
pub use wes::{derive_wes_features, VariantCall, WesColumns, CADD_PREFIX};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("missing value for sample `{sample}`, feature `{feature}`")]
    MissingValue { sample: String, feature: String },
    #[error("feature `{feature}` is declared binary but sample `{sample}` has {value}")]
    ValueKind {
        feature: String,
        sample: String,
        value: f64,
    },
    #[error("feature `{feature}` has a non-finite value for sample `{sample}`")]
    NonFinite { feature: String, sample: String },
    #[error("features not declared in the schema: {0:?}")]
    UndeclaredFeatures(Vec<String>),
    #[error("schema declares features absent from the matrix: {0:?}")]
    UnknownSchemaFeatures(Vec<String>),
    #[error("duplicate {kind} name `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("matrix must have at least one sample and one feature")]
    Empty,
    #[error("response field has {0} categories, expected exactly two")]
    ResponseCategories(usize),
    #[error("designated positive response `{0}` not present")]
    UnknownPositive(String),
    #[error("labels do not match matrix samples: {0}")]
    SampleMismatch(String),
    #[error("invalid split fractions {0:?}: must be nonnegative and sum to 1")]
    Fractions([f64; 3]),
    #[error("negative CADD score {score} for gene `{gene}` in sample `{sample}`")]
    NegativeScore {
        sample: String,
        gene: String,
        score: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rna,
    Wes,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rna, Modality::Wes];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rna => "rna",
            Modality::Wes => "wes",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Continuous,
    Binary,
}

/// Samples × features table with per-feature modality and value kind.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    sample_ids: Vec<String>,
    feature_names: Vec<String>,
    modality: Vec<Modality>,
    value_kind: Vec<ValueKind>,
    values: Tensor,
}

impl FeatureMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        feature_names: Vec<String>,
        modality: Vec<Modality>,
        value_kind: Vec<ValueKind>,
        values: Tensor,
    ) -> Result<Self, DataError> {
        if sample_ids.is_empty() || feature_names.is_empty() {
            return Err(DataError::Empty);
        }
        check_unique("sample", &sample_ids)?;
        check_unique("feature", &feature_names)?;
        let (n, x) = (sample_ids.len(), feature_names.len());
        if modality.len() != x || value_kind.len() != x || values.shape() != [n, x] {
            return Err(DataError::Format {
                path: "<matrix>".into(),
                detail: format!(
                    "inconsistent dimensions: {n} samples, {x} features, values {:?}",
                    values.shape()
                ),
            });
        }
        for i in 0..n {
            for j in 0..x {
                let v = values.get2(i, j);
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        feature: feature_names[j].clone(),
                        sample: sample_ids[i].clone(),
                    });
                }
                if value_kind[j] == ValueKind::Binary && v != 0.0 && v != 1.0 {
                    return Err(DataError::ValueKind {
                        feature: feature_names[j].clone(),
                        sample: sample_ids[i].clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            sample_ids,
            feature_names,
            modality,
            value_kind,
            values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn value_kind(&self) -> &[ValueKind] {
        &self.value_kind
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Indices of the features belonging to one modality.
    pub fn modality_indices(&self, m: Modality) -> Vec<usize> {
        (0..self.n_features())
            .filter(|&j| self.modality[j] == m)
            .collect()
    }

    /// Row subset, preserving the given order.
    pub fn select_samples(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            modality: self.modality.clone(),
            value_kind: self.value_kind.clone(),
            values: self.values.select_rows(rows),
        }
    }

    /// Appends columns (all samples must already be aligned with `self`).
    pub fn with_columns(
        &self,
        names: Vec<String>,
        modality: Modality,
        kind: ValueKind,
        columns: &Tensor,
    ) -> Result<Self, DataError> {
        let (n, x, extra) = (self.n_samples(), self.n_features(), names.len());
        if columns.shape() != [n, extra] {
            return Err(DataError::Format {
                path: "<matrix>".into(),
                detail: format!("appended block has shape {:?}", columns.shape()),
            });
        }
        let mut data = Vec::with_capacity(n * (x + extra));
        for i in 0..n {
            data.extend_from_slice(self.values.row(i));
            data.extend_from_slice(columns.row(i));
        }
        let mut feature_names = self.feature_names.clone();
        feature_names.extend(names);
        let mut mods = self.modality.clone();
        mods.extend(std::iter::repeat_n(modality, extra));
        let mut kinds = self.value_kind.clone();
        kinds.extend(std::iter::repeat_n(kind, extra));
        Self::new(
            self.sample_ids.clone(),
            feature_names,
            mods,
            kinds,
            Tensor::matrix(n, x + extra, data).expect("sized above"),
        )
    }
}

fn check_unique(kind: &'static str, names: &[String]) -> Result<(), DataError> {
    let mut seen = HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(DataError::Duplicate {
                kind,
                name: n.clone(),
            });
        }
    }
    Ok(())
}

/// Per-feature statistics fitted on a sample subset; binary features keep
/// mean 0 / std 1 so applying them is a no-op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub continuous: Vec<bool>,
}

impl Standardizer {
    pub fn fit(m: &FeatureMatrix, rows: &[usize]) -> Self {
        assert!(!rows.is_empty(), "standardization needs at least one sample");
        let x = m.n_features();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; x];
        let mut std = vec![1.0; x];
        let continuous: Vec<bool> = m
            .value_kind
            .iter()
            .map(|k| *k == ValueKind::Continuous)
            .collect();
        for j in (0..x).filter(|&j| continuous[j]) {
            let mu = rows.iter().map(|&i| m.values.get2(i, j)).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&i| (m.values.get2(i, j) - mu).powi(2))
                .sum::<f64>()
                / n;
            mean[j] = mu;
            std[j] = var.sqrt();
        }
        Self {
            mean,
            std,
            continuous,
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let mut out = m.clone();
        let x = m.n_features();
        for i in 0..m.n_samples() {
            for j in (0..x).filter(|&j| self.continuous[j]) {
                let v = m.values.get2(i, j);
                let z = if self.std[j] > 0.0 {
                    (v - self.mean[j]) / self.std[j]
                } else {
                    0.0
                };
                out.values.set2(i, j, z);
            }
        }
        out
    }
}

/// z-scores continuous columns with population statistics computed on
/// `stats_from` only; binary columns pass through and zero-variance columns
/// become all zeros.
pub fn zscore_standardize(m: &FeatureMatrix, stats_from: &[usize]) -> (FeatureMatrix, Standardizer) {
    let s = Standardizer::fit(m, stats_from);
    (s.apply(m), s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub response: u8,
    pub tissue: String,
    pub tissue_code: usize,
    pub pfs_time: Option<f64>,
    pub pfs_event: Option<u8>,
    pub split: Option<Split>,
}

/// Clinical labels aligned with a [`FeatureMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub records: Vec<SampleRecord>,
    /// Tissue names indexed by code.
    pub tissues: Vec<String>,
    /// Original response category mapped to 1.
    pub positive_label: String,
}

impl CohortTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.response).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Reorders records to follow `matrix`'s sample order; the two id sets
    /// must coincide.
    pub fn aligned_to(&self, matrix: &FeatureMatrix) -> Result<Self, DataError> {
        if self.records.len() != matrix.n_samples() {
            return Err(DataError::SampleMismatch(format!(
                "{} labelled samples vs {} matrix rows",
                self.records.len(),
                matrix.n_samples()
            )));
        }
        let by_id: BTreeMap<&str, &SampleRecord> = self
            .records
            .iter()
            .map(|r| (r.sample_id.as_str(), r))
            .collect();
        let mut records = Vec::with_capacity(self.records.len());
        for sid in matrix.sample_ids() {
            let r = by_id
                .get(sid.as_str())
                .ok_or_else(|| DataError::SampleMismatch(format!("no label for `{sid}`")))?;
            records.push((*r).clone());
        }
        Ok(Self {
            records,
            tissues: self.tissues.clone(),
            positive_label: self.positive_label.clone(),
        })
    }
}

/// Maps raw categorical fields to codes. The response field must have exactly
/// two categories; `positive` names the one mapped to 1, defaulting to the
/// second in sorted order. Numeric `{0,1}` responses pass through.
pub fn encode_labels(raw: &[RawLabel], positive: Option<&str>) -> Result<CohortTable, DataError> {
    let categories: BTreeSet<&str> = raw.iter().map(|r| r.response.as_str()).collect();
    if categories.len() > 2 || categories.is_empty() {
        return Err(DataError::ResponseCategories(categories.len()));
    }
    let numeric = categories.iter().all(|c| *c == "0" || *c == "1");
    let positive_label = match (positive, numeric) {
        (Some(p), _) => {
            if !categories.contains(p) && !(numeric && (p == "0" || p == "1")) {
                return Err(DataError::UnknownPositive(p.to_string()));
            }
            p.to_string()
        }
        (None, true) => "1".to_string(),
        (None, false) => {
            if categories.len() != 2 {
                return Err(DataError::ResponseCategories(categories.len()));
            }
            categories.iter().nth(1).expect("two categories").to_string()
        }
    };
    let tissues: Vec<String> = raw
        .iter()
        .map(|r| r.tissue.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let records = raw
        .iter()
        .map(|r| SampleRecord {
            sample_id: r.sample_id.clone(),
            response: u8::from(r.response == positive_label),
            tissue: r.tissue.clone(),
            tissue_code: tissues.binary_search(&r.tissue).expect("collected above"),
            pfs_time: r.pfs_time,
            pfs_event: r.pfs_event,
            split: r.split,
        })
        .collect();
    check_unique(
        "sample",
        &raw.iter().map(|r| r.sample_id.clone()).collect::<Vec<_>>(),
    )?;
    Ok(CohortTable {
        records,
        tissues,
        positive_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(values: Vec<f64>, kinds: Vec<ValueKind>) -> FeatureMatrix {
        let x = kinds.len();
        let n = values.len() / x;
        FeatureMatrix::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..x).map(|j| format!("f{j}")).collect(),
            vec![Modality::Rna; x],
            kinds,
            Tensor::matrix(n, x, values).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zscore_uses_population_std() {
        let m = matrix(vec![1.0, 2.0, 3.0], vec![ValueKind::Continuous]);
        let (z, _) = zscore_standardize(&m, &[0, 1, 2]);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.values().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_constant_and_binary_columns() {
        let m = matrix(
            vec![5.0, 0.0, 5.0, 1.0, 5.0, 0.0],
            vec![ValueKind::Continuous, ValueKind::Binary],
        );
        let (z, _) = zscore_standardize(&m, &[0, 1, 2]);
        assert_eq!(z.values().column(0), vec![0.0, 0.0, 0.0]);
        assert_eq!(z.values().column(1), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zscore_statistics_come_from_subset_only() {
        let m = matrix(vec![0.0, 2.0, 100.0], vec![ValueKind::Continuous]);
        let (z, s) = zscore_standardize(&m, &[0, 1]);
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(z.values().column(0), vec![-1.0, 1.0, 99.0]);
    }

    #[test]
    fn binary_column_rejects_fraction() {
        let r = FeatureMatrix::new(
            vec!["a".into()],
            vec!["f".into()],
            vec![Modality::Wes],
            vec![ValueKind::Binary],
            Tensor::matrix(1, 1, vec![0.5]).unwrap(),
        );
        assert!(matches!(r, Err(DataError::ValueKind { .. })));
    }

    #[test]
    fn duplicate_feature_rejected() {
        let r = FeatureMatrix::new(
            vec!["a".into()],
            vec!["f".into(), "f".into()],
            vec![Modality::Rna; 2],
            vec![ValueKind::Continuous; 2],
            Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
        );
        assert!(matches!(r, Err(DataError::Duplicate { .. })));
    }

    proptest::proptest! {
        #[test]
        fn train_columns_have_unit_moments(
            vals in proptest::collection::vec(-1e3f64..1e3, 12),
            split in 2usize..6,
        ) {
            let m = matrix(vals, vec![ValueKind::Continuous; 2]);
            let train: Vec<usize> = (0..split).collect();
            let (z, s) = zscore_standardize(&m, &train);
            for j in 0..2 {
                if s.std[j] < 1e-6 {
                    continue;
                }
                let col: Vec<f64> = train.iter().map(|&i| z.values().get2(i, j)).collect();
                let n = col.len() as f64;
                let mu = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
                proptest::prop_assert!(mu.abs() < 1e-9);
                proptest::prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }
    }

    fn raw(id: &str, resp: &str) -> RawLabel {
        RawLabel {
            sample_id: id.into(),
            response: resp.into(),
            tissue: "skin".into(),
            pfs_time: None,
            pfs_event: None,
            split: None,
        }
    }

    #[test]
    fn encode_labels_named_categories() {
        let t = encode_labels(&[raw("a", "responder"), raw("b", "nonresponder")], Some("responder"))
            .unwrap();
        assert_eq!(t.labels(), vec![1, 0]);
        // default: second category in sorted order is positive
        let t = encode_labels(&[raw("a", "responder"), raw("b", "nonresponder")], None).unwrap();
        assert_eq!(t.labels(), vec![1, 0]);
    }

    #[test]
    fn encode_labels_numeric_passthrough() {
        let t = encode_labels(&[raw("a", "0"), raw("b", "1"), raw("c", "1")], None).unwrap();
        assert_eq!(t.labels(), vec![0, 1, 1]);
    }

    #[test]
    fn encode_labels_three_categories_fail() {
        let r = encode_labels(&[raw("a", "CR"), raw("b", "PR"), raw("c", "PD")], None);
        assert!(matches!(r, Err(DataError::ResponseCategories(3))));
    }
}

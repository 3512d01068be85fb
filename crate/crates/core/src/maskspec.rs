//! Gene sets → binary feature masks for the encoder bank.
//!
//! Each specified entry selects the features of one gene set within one
//! modality; each modality additionally gets a residual entry holding the
//! features no specified entry claimed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{write_atomic, DataError, FeatureMatrix, Modality, CADD_PREFIX};

pub const WES_ENTRY_PREFIX: &str = "wes_";
pub const KEGG_PREFIX: &str = "kegg_";
pub const KEGG_MIN_GENES: usize = 10;
pub const KEGG_KEYWORDS: [&str; 3] = ["pathway", "interaction", "transporter"];

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("gene set `{0}` has no genes")]
    EmptyGeneSet(String),
    #[error("two gene sets normalize to the same name `{0}`")]
    DuplicateName(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("gene-set file {path}: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneSet {
    pub name: String,
    #[serde(default)]
    pub source: String,
    pub genes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Specified,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    pub modality: Modality,
    pub role: Role,
    /// Sorted feature indices into the matrix columns.
    pub indices: Vec<usize>,
}

impl MaskEntry {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub entries: Vec<MaskEntry>,
    pub n_features: usize,
    pub feature_names: Vec<String>,
}

impl MaskSet {
    /// Number of encoder factors.
    pub fn b(&self) -> usize {
        self.entries.len()
    }

    /// Number of residual factors.
    pub fn u(&self) -> usize {
        self.entries.iter().filter(|e| e.role == Role::Residual).count()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(MaskEntry::len).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// SHA-256 over the canonical JSON form; checkpoints store it so a model
    /// is never reloaded against different masks.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("mask set serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn export(&self, path: &Path) -> Result<(), MaskError> {
        #[derive(Serialize)]
        struct Export<'a> {
            fingerprint: String,
            n_entries: usize,
            n_residual: usize,
            #[serde(flatten)]
            masks: &'a MaskSet,
        }
        let body = Export {
            fingerprint: self.fingerprint(),
            n_entries: self.b(),
            n_residual: self.u(),
            masks: self,
        };
        let s = serde_json::to_string_pretty(&body).expect("mask export serializes");
        Ok(write_atomic(path, s.as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path).map_err(|e| MaskError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| MaskError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CompiledMasks {
    pub masks: MaskSet,
    pub warnings: Vec<String>,
}

/// Spaces become underscores; case is kept.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Feature name a gene resolves to in the given modality.
pub fn feature_name_for(gene: &str, modality: Modality) -> String {
    match modality {
        Modality::Rna => gene.to_string(),
        Modality::Wes => format!("{CADD_PREFIX}{gene}"),
    }
}

pub fn compile_masks(gene_sets: &[GeneSet], matrix: &FeatureMatrix) -> Result<CompiledMasks, MaskError> {
    let mut sets: Vec<(String, &GeneSet)> = gene_sets
        .iter()
        .map(|g| (normalize_name(&g.name), g))
        .collect();
    sets.sort_by(|a, b| a.0.cmp(&b.0));
    for w in sets.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(MaskError::DuplicateName(w[0].0.clone()));
        }
    }

    let col: BTreeMap<(&str, Modality), usize> = matrix
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, f)| ((f.as_str(), matrix.modality()[j]), j))
        .collect();

    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    let mut claimed: BTreeMap<Modality, BTreeSet<usize>> = BTreeMap::new();
    for (name, set) in &sets {
        if set.genes.is_empty() {
            return Err(MaskError::EmptyGeneSet(set.name.clone()));
        }
        let mut matched_any = false;
        for m in Modality::ALL {
            let indices: BTreeSet<usize> = set
                .genes
                .iter()
                .filter_map(|g| col.get(&(feature_name_for(g, m).as_str(), m)).copied())
                .collect();
            if indices.is_empty() {
                continue;
            }
            matched_any = true;
            claimed.entry(m).or_default().extend(&indices);
            entries.push(MaskEntry {
                name: match m {
                    Modality::Rna => name.clone(),
                    Modality::Wes => format!("{WES_ENTRY_PREFIX}{name}"),
                },
                modality: m,
                role: Role::Specified,
                indices: indices.into_iter().collect(),
            });
        }
        if !matched_any {
            warnings.push(format!(
                "gene set `{}` matches no features in either modality; dropped",
                set.name
            ));
        }
    }

    for m in Modality::ALL {
        let all = matrix.modality_indices(m);
        if all.is_empty() {
            continue;
        }
        let taken = claimed.get(&m);
        let residual: Vec<usize> = all
            .into_iter()
            .filter(|j| taken.is_none_or(|t| !t.contains(j)))
            .collect();
        if residual.is_empty() {
            warnings.push(format!(
                "every {m} feature belongs to a gene set; no {m} residual encoder"
            ));
            continue;
        }
        entries.push(MaskEntry {
            name: format!("{m}_residual"),
            modality: m,
            role: Role::Residual,
            indices: residual,
        });
    }

    Ok(CompiledMasks {
        masks: MaskSet {
            entries,
            n_features: matrix.n_features(),
            feature_names: matrix.feature_names().to_vec(),
        },
        warnings,
    })
}

/// Compact form of `m ⊙ x`: the masked-in coordinates, in index order.
pub fn apply_mask(entry: &MaskEntry, x: &[f64]) -> Vec<f64> {
    entry.indices.iter().map(|&j| x[j]).collect()
}

/// Fractions of a gene set found among the RNA and WES features.
pub fn pathway_overlap(genes: &[String], matrix: &FeatureMatrix) -> (f64, f64) {
    let unique: BTreeSet<&str> = genes.iter().map(String::as_str).collect();
    if unique.is_empty() {
        return (0.0, 0.0);
    }
    let present: BTreeSet<(&str, Modality)> = matrix
        .feature_names()
        .iter()
        .zip(matrix.modality())
        .map(|(f, m)| (f.as_str(), *m))
        .collect();
    let frac = |m: Modality| {
        let hits = unique
            .iter()
            .filter(|g| present.contains(&(feature_name_for(g, m).as_str(), m)))
            .count();
        hits as f64 / unique.len() as f64
    };
    (frac(Modality::Rna), frac(Modality::Wes))
}

/// Keeps KEGG pathways with at least ten genes whose name mentions a pathway,
/// interaction or transporter; survivors are renamed `kegg_<Name_With_Underscores>`.
pub fn filter_kegg(pathways: &[GeneSet]) -> Vec<GeneSet> {
    pathways
        .iter()
        .filter(|p| {
            let lower = p.name.to_lowercase();
            let distinct: BTreeSet<&String> = p.genes.iter().collect();
            distinct.len() >= KEGG_MIN_GENES && KEGG_KEYWORDS.iter().any(|k| lower.contains(k))
        })
        .map(|p| GeneSet {
            name: format!("{KEGG_PREFIX}{}", normalize_name(&p.name)),
            source: if p.source.is_empty() { "kegg".into() } else { p.source.clone() },
            genes: p.genes.clone(),
        })
        .collect()
}

pub fn load_gene_sets(path: &Path) -> Result<Vec<GeneSet>, MaskError> {
    let text = std::fs::read_to_string(path).map_err(|e| MaskError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| MaskError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn write_gene_sets(path: &Path, sets: &[GeneSet]) -> Result<(), MaskError> {
    let s = serde_json::to_string_pretty(sets).expect("gene sets serialize");
    Ok(write_atomic(path, s.as_bytes())?)
}

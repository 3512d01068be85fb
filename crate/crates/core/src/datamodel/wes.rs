use std::collections::{BTreeMap, BTreeSet};

use super::DataError;
use crate::ndmath::Tensor;

pub const CADD_PREFIX: &str = "cadd_";

#[derive(Clone, Debug, PartialEq)]
pub struct VariantCall {
    pub sample_id: String,
    pub gene: String,
    pub phred: f64,
}

/// Sample-level CADD block: one column per gene, rows follow `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct WesColumns {
    pub names: Vec<String>,
    pub genes: Vec<String>,
    pub values: Tensor,
}

/// Per sample and gene, keeps the highest PHRED-scaled CADD score among that
/// sample's variants; absent pairs are 0. Columns are the sorted union of
/// genes seen in `calls`.
pub fn derive_wes_features(samples: &[String], calls: &[VariantCall]) -> Result<WesColumns, DataError> {
    let row_of: BTreeMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let genes: Vec<String> = calls
        .iter()
        .map(|c| c.gene.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_of: BTreeMap<&str, usize> = genes.iter().enumerate().map(|(j, g)| (g.as_str(), j)).collect();
    let mut values = Tensor::zeros(&[samples.len(), genes.len()]);
    for c in calls {
        if !(c.phred >= 0.0) || !c.phred.is_finite() {
            return Err(DataError::NegativeScore {
                sample: c.sample_id.clone(),
                gene: c.gene.clone(),
                score: c.phred,
            });
        }
        let i = *row_of.get(c.sample_id.as_str()).ok_or_else(|| {
            DataError::SampleMismatch(format!("variant for unknown sample `{}`", c.sample_id))
        })?;
        let j = col_of[c.gene.as_str()];
        if c.phred > values.get2(i, j) {
            values.set2(i, j, c.phred);
        }
    }
    Ok(WesColumns {
        names: genes.iter().map(|g| format!("{CADD_PREFIX}{g}")).collect(),
        genes,
        values,
    })
}

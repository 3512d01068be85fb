use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CohortTable, DataError, FeatureMatrix, Modality, Split, ValueKind};
use crate::ndmath::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub modality: Modality,
    pub value_kind: ValueKind,
}

/// Feature name → modality and value kind, stored as a JSON object.
pub type FeatureSchema = BTreeMap<String, SchemaEntry>;

/// One row of the labels TSV before categorical encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLabel {
    pub sample_id: String,
    pub response: String,
    pub tissue: String,
    pub pfs_time: Option<f64>,
    pub pfs_event: Option<u8>,
    pub split: Option<Split>,
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn format_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// crash never leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema, DataError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<(), DataError> {
    let s = serde_json::to_string_pretty(schema).expect("schema serializes");
    write_atomic(path, s.as_bytes())
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim(),
        "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "null" | "NULL"
    )
}

/// Reads a samples × features TSV and validates it against the schema.
pub fn load_feature_matrix(path: &Path, schema_path: &Path) -> Result<FeatureMatrix, DataError> {
    let schema = read_schema(schema_path)?;
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err(path, "empty file"))?;
    let mut cols = header.split('\t');
    let first = cols.next().unwrap_or_default().trim();
    if first != "sample_id" {
        return Err(format_err(
            path,
            format!("first header column must be `sample_id`, found `{first}`"),
        ));
    }
    let features: Vec<String> = cols.map(|c| c.trim().to_string()).collect();

    let undeclared: Vec<String> = features
        .iter()
        .filter(|f| !schema.contains_key(*f))
        .cloned()
        .collect();
    if !undeclared.is_empty() {
        return Err(DataError::UndeclaredFeatures(undeclared));
    }
    let absent: Vec<String> = schema
        .keys()
        .filter(|k| !features.contains(k))
        .cloned()
        .collect();
    if !absent.is_empty() {
        return Err(DataError::UnknownSchemaFeatures(absent));
    }

    let x = features.len();
    let mut samples = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != x + 1 {
            return Err(format_err(
                path,
                format!(
                    "row {} has {} fields, expected {}",
                    lineno + 2,
                    cells.len(),
                    x + 1
                ),
            ));
        }
        let sid = cells[0].trim().to_string();
        for (j, cell) in cells[1..].iter().enumerate() {
            if is_missing(cell) {
                return Err(DataError::MissingValue {
                    sample: sid,
                    feature: features[j].clone(),
                });
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                format_err(
                    path,
                    format!("unparseable value `{cell}` at sample `{sid}`, feature `{}`", features[j]),
                )
            })?;
            data.push(v);
        }
        samples.push(sid);
    }
    let n = samples.len();
    let modality = features.iter().map(|f| schema[f].modality).collect();
    let kinds = features.iter().map(|f| schema[f].value_kind).collect();
    let values = Tensor::matrix(n, x, data).map_err(|e| format_err(path, e.to_string()))?;
    FeatureMatrix::new(samples, features, modality, kinds, values)
}

/// Writes the matrix TSV and its schema next to each other.
pub fn write_feature_matrix(
    m: &FeatureMatrix,
    path: &Path,
    schema_path: &Path,
) -> Result<(), DataError> {
    let mut out = String::from("sample_id");
    for f in m.feature_names() {
        out.push('\t');
        out.push_str(f);
    }
    out.push('\n');
    for (i, sid) in m.sample_ids().iter().enumerate() {
        out.push_str(sid);
        for &v in m.values().row(i) {
            out.push('\t');
            out.push_str(&format_value(v));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    let schema: FeatureSchema = m
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, f)| {
            (
                f.clone(),
                SchemaEntry {
                    modality: m.modality()[j],
                    value_kind: m.value_kind()[j],
                },
            )
        })
        .collect();
    write_schema(schema_path, &schema)
}

/// Shortest representation that round-trips.
pub fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

const LABEL_COLUMNS: [&str; 5] = ["sample_id", "response", "tissue", "pfs_time", "pfs_event"];

pub fn load_labels(path: &Path) -> Result<Vec<RawLabel>, DataError> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| format_err(path, "empty file"))?
        .split('\t')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let mut idx = [0usize; 3];
    for (k, name) in LABEL_COLUMNS[..3].iter().enumerate() {
        idx[k] = col(name).ok_or_else(|| format_err(path, format!("missing column `{name}`")))?;
    }
    let (time_col, event_col, split_col) = (col("pfs_time"), col("pfs_event"), col("split"));

    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
        let row = lineno + 2;
        let get = |c: Option<usize>| c.and_then(|c| cells.get(c).copied()).filter(|s| !is_missing(s));
        let sample_id = get(Some(idx[0]))
            .ok_or_else(|| format_err(path, format!("row {row}: missing sample_id")))?
            .to_string();
        let response = get(Some(idx[1]))
            .ok_or_else(|| format_err(path, format!("row {row}: missing response for `{sample_id}`")))?
            .to_string();
        let tissue = get(Some(idx[2])).unwrap_or("unknown").to_string();
        let pfs_time = get(time_col)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|t| *t >= 0.0 && t.is_finite())
                    .ok_or_else(|| format_err(path, format!("row {row}: bad pfs_time `{s}`")))
            })
            .transpose()?;
        let pfs_event = get(event_col)
            .map(|s| match s {
                "0" | "0.0" => Ok(0u8),
                "1" | "1.0" => Ok(1u8),
                _ => Err(format_err(path, format!("row {row}: bad pfs_event `{s}`"))),
            })
            .transpose()?;
        let split = get(split_col)
            .map(|s| match s {
                "train" => Ok(Split::Train),
                "val" => Ok(Split::Val),
                "test" => Ok(Split::Test),
                _ => Err(format_err(path, format!("row {row}: bad split `{s}`"))),
            })
            .transpose()?;
        out.push(RawLabel {
            sample_id,
            response,
            tissue,
            pfs_time,
            pfs_event,
            split,
        });
    }
    Ok(out)
}

/// Writes encoded labels (response as 0/1) plus the split column.
pub fn write_labels(path: &Path, cohort: &CohortTable) -> Result<(), DataError> {
    let mut out = LABEL_COLUMNS.join("\t");
    out.push_str("\tsplit\n");
    for r in &cohort.records {
        let time = r.pfs_time.map(format_value).unwrap_or_else(|| "NA".into());
        let event = r.pfs_event.map(|e| e.to_string()).unwrap_or_else(|| "NA".into());
        let split = r.split.map(Split::as_str).unwrap_or("NA");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.sample_id, r.response, r.tissue, time, event, split
        ));
    }
    write_atomic(path, out.as_bytes())
}

//! Synthetic cohorts with planted pathway structure, response signal and
//! progression-free survival.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    encode_labels, write_atomic, write_feature_matrix, write_labels, CohortTable, DataError,
    FeatureMatrix, Modality, RawLabel, ValueKind,
};
use crate::maskspec::{feature_name_for, write_gene_sets, GeneSet, MaskError};
use crate::ndmath::Tensor;

pub const RESPONDER: &str = "responder";
pub const NON_RESPONDER: &str = "non_responder";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("truth record: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwaySpec {
    pub name: String,
    pub size: usize,
    pub modality: Modality,
    /// Shift of the pathway factor for responders.
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSpec {
    /// Event rate of responders, per day.
    pub baseline_hazard: f64,
    /// Non-responder hazard over responder hazard.
    pub hazard_ratio: f64,
    /// Rate of independent exponential censoring, per day.
    pub censoring_hazard: f64,
    /// Administrative censoring time, days.
    pub follow_up: f64,
}

impl Default for SurvivalSpec {
    fn default() -> Self {
        SurvivalSpec {
            baseline_hazard: 1.0 / 600.0,
            hazard_ratio: 3.0,
            censoring_hazard: 1.0 / 1500.0,
            follow_up: 1500.0,
        }
    }
}

/// Missing fields take their value from [`SynthSpec::benchmark`] with seed 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_rna: usize,
    pub n_wes: usize,
    pub pathways: Vec<PathwaySpec>,
    pub response_rate: f64,
    pub noise_sigma: f64,
    pub survival: SurvivalSpec,
    /// Unannotated rna programs of this many genes each, placed in the residual.
    pub hidden_programs: Vec<usize>,
    /// Latent threshold for binary wes features in pathways.
    pub wes_threshold: f64,
    pub tissues: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::benchmark(0)
    }
}

impl SynthSpec {
    /// 400 samples, 20 pathways of 15 genes (17 rna, 3 wes), three rna
    /// pathways shifted by 2.0 for responders, noise 0.5.
    pub fn benchmark(seed: u64) -> Self {
        let informative = [0usize, 4, 8];
        let pathways = (0..20)
            .map(|p| PathwaySpec {
                name: format!("PW{:02}", p + 1),
                size: 15,
                modality: if p < 17 { Modality::Rna } else { Modality::Wes },
                effect: if informative.contains(&p) { 2.0 } else { 0.0 },
            })
            .collect();
        SynthSpec {
            n_samples: 400,
            n_rna: 320,
            n_wes: 60,
            pathways,
            response_rate: 0.4,
            noise_sigma: 0.5,
            survival: SurvivalSpec::default(),
            hidden_programs: vec![10, 10],
            wes_threshold: 0.5,
            tissues: ["melanoma", "nsclc", "rcc"].map(String::from).to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_samples < 2 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        if self.n_rna + self.n_wes == 0 {
            return bad("need at least one feature".into());
        }
        if !(self.response_rate > 0.0 && self.response_rate < 1.0) {
            return bad(format!("response_rate must lie in (0, 1), got {}", self.response_rate));
        }
        let n_pos = self.n_responders();
        if n_pos == 0 || n_pos == self.n_samples {
            return bad("response_rate leaves one class empty".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and nonnegative, got {}", self.noise_sigma));
        }
        if !self.wes_threshold.is_finite() {
            return bad("wes_threshold must be finite".into());
        }
        let s = &self.survival;
        for (name, v) in [
            ("baseline_hazard", s.baseline_hazard),
            ("hazard_ratio", s.hazard_ratio),
            ("follow_up", s.follow_up),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("survival.{name} must be positive, got {v}"));
            }
        }
        if !(s.censoring_hazard.is_finite() && s.censoring_hazard >= 0.0) {
            return bad(format!("survival.censoring_hazard must be nonnegative, got {}", s.censoring_hazard));
        }
        if self.tissues.is_empty() {
            return bad("need at least one tissue".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.pathways {
            if p.size == 0 {
                return bad(format!("pathway {} has size 0", p.name));
            }
            if !p.effect.is_finite() {
                return bad(format!("pathway {} has a non-finite effect", p.name));
            }
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate pathway name {}", p.name));
            }
        }
        if self.hidden_programs.contains(&0) {
            return bad("hidden programs must have positive size".into());
        }
        let used = |m: Modality| -> usize {
            self.pathways.iter().filter(|p| p.modality == m).map(|p| p.size).sum()
        };
        let rna_used = used(Modality::Rna) + self.hidden_programs.iter().sum::<usize>();
        if rna_used > self.n_rna {
            return bad(format!("rna pathways and hidden programs need {rna_used} genes, n_rna is {}", self.n_rna));
        }
        if used(Modality::Wes) > self.n_wes {
            return bad(format!("wes pathways need {} genes, n_wes is {}", used(Modality::Wes), self.n_wes));
        }
        Ok(())
    }

    fn n_responders(&self) -> usize {
        (self.n_samples as f64 * self.response_rate).round() as usize
    }
}

/// Ground truth behind a generated cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub sample_ids: Vec<String>,
    /// 1 for responders.
    pub labels: Vec<u8>,
    /// Planted cluster per sample: 1 for non-responders, 2 for responders.
    pub clusters: Vec<usize>,
    pub informative_pathways: Vec<String>,
    pub pathway_names: Vec<String>,
    /// Planted factor values, one row per sample, columns follow `pathway_names`.
    pub factors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub features: FeatureMatrix,
    pub cohort: CohortTable,
    pub gene_sets: Vec<GeneSet>,
    pub truth: TruthRecord,
}

#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub features: PathBuf,
    pub schema: PathBuf,
    pub labels: PathBuf,
    pub gene_sets: PathBuf,
    pub truth: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            features: dir.join("features.tsv"),
            schema: dir.join("schema.json"),
            labels: dir.join("labels.tsv"),
            gene_sets: dir.join("gene_sets.json"),
            truth: dir.join("truth.json"),
        }
    }
}

/// What drives one feature column.
#[derive(Clone, Copy, Debug)]
enum Driver {
    Pathway { factor: usize, loading: f64 },
    Hidden { program: usize, loading: f64 },
    Noise,
}

struct Layout {
    names: Vec<String>,
    modality: Vec<Modality>,
    drivers: Vec<Driver>,
    gene_sets: Vec<GeneSet>,
}

fn gene_name(modality: Modality, i: usize) -> String {
    match modality {
        Modality::Rna => format!("R{:04}", i + 1),
        Modality::Wes => format!("W{:04}", i + 1),
    }
}

fn loading(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.random_range(0.7..1.3);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Layout {
    let mut out = Layout {
        names: Vec::new(),
        modality: Vec::new(),
        drivers: Vec::new(),
        gene_sets: Vec::new(),
    };
    for modality in Modality::ALL {
        let n = match modality {
            Modality::Rna => spec.n_rna,
            Modality::Wes => spec.n_wes,
        };
        let mut drivers = Vec::with_capacity(n);
        for (p, pw) in spec.pathways.iter().enumerate() {
            if pw.modality != modality {
                continue;
            }
            let genes: Vec<String> = (drivers.len()..drivers.len() + pw.size)
                .map(|i| gene_name(modality, i))
                .collect();
            out.gene_sets.push(GeneSet {
                name: pw.name.clone(),
                source: "synthetic".into(),
                genes,
            });
            for _ in 0..pw.size {
                drivers.push(Driver::Pathway {
                    factor: p,
                    loading: loading(rng),
                });
            }
        }
        if modality == Modality::Rna {
            for (h, &size) in spec.hidden_programs.iter().enumerate() {
                for _ in 0..size {
                    drivers.push(Driver::Hidden {
                        program: h,
                        loading: loading(rng),
                    });
                }
            }
        }
        drivers.resize(n, Driver::Noise);
        for (i, d) in drivers.into_iter().enumerate() {
            out.names.push(feature_name_for(&gene_name(modality, i), modality));
            out.modality.push(modality);
            out.drivers.push(d);
        }
    }
    out
}

/// Per-sample draws from the sample's own substream.
struct SampleDraw {
    factors: Vec<f64>,
    values: Vec<f64>,
    tissue: usize,
    time: f64,
    event: bool,
}

fn draw_sample(spec: &SynthSpec, lay: &Layout, responder: bool, stream: u64) -> SampleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let shift = if responder { 1.0 } else { 0.0 };
    let factors: Vec<f64> = spec.pathways.iter().map(|p| normal() + p.effect * shift).collect();
    let hidden: Vec<f64> = spec.hidden_programs.iter().map(|_| normal()).collect();
    let values = lay
        .drivers
        .iter()
        .zip(&lay.modality)
        .map(|(d, m)| {
            let latent = match *d {
                Driver::Pathway { factor, loading } => loading * factors[factor] + spec.noise_sigma * normal(),
                Driver::Hidden { program, loading } => loading * hidden[program] + spec.noise_sigma * normal(),
                Driver::Noise => normal(),
            };
            match (m, d) {
                (Modality::Rna, _) => latent,
                (Modality::Wes, Driver::Pathway { .. }) => f64::from(u8::from(latent > spec.wes_threshold)),
                // Background mutations at roughly 10% prevalence.
                (Modality::Wes, _) => f64::from(u8::from(latent > 1.2816)),
            }
        })
        .collect();
    let tissue = rng.random_range(0..spec.tissues.len());
    let s = &spec.survival;
    let hazard = if responder { s.baseline_hazard } else { s.baseline_hazard * s.hazard_ratio };
    let t_event = Exp::new(hazard).expect("validated hazard").sample(&mut rng);
    let t_censor = if s.censoring_hazard > 0.0 {
        Exp::new(s.censoring_hazard).expect("validated hazard").sample(&mut rng)
    } else {
        f64::INFINITY
    }
    .min(s.follow_up);
    let event = t_event <= t_censor;
    // Tenths of a day keep the label file short.
    let time = ((t_event.min(t_censor) * 10.0).round() / 10.0).max(0.1);
    SampleDraw {
        factors,
        values,
        tissue,
        time,
        event,
    }
}

/// Generate a cohort. The same spec (including seed) yields a bit-identical
/// cohort regardless of thread count.
pub fn generate(spec: &SynthSpec) -> Result<SynthCohort, SynthError> {
    spec.validate()?;
    let mut structure = ChaCha8Rng::seed_from_u64(spec.seed);
    let lay = layout(spec, &mut structure);
    let n = spec.n_samples;
    let mut labels = vec![0u8; n];
    labels[..spec.n_responders()].fill(1);
    labels.shuffle(&mut structure);

    let draws: Vec<SampleDraw> = (0..n)
        .into_par_iter()
        .map(|i| draw_sample(spec, &lay, labels[i] == 1, i as u64 + 1))
        .collect();

    let width = n.to_string().len().max(4);
    let sample_ids: Vec<String> = (0..n).map(|i| format!("S{:0width$}", i + 1)).collect();
    let values: Vec<f64> = draws.iter().flat_map(|d| d.values.iter().copied()).collect();
    let kinds = lay
        .modality
        .iter()
        .map(|m| match m {
            Modality::Rna => ValueKind::Continuous,
            Modality::Wes => ValueKind::Binary,
        })
        .collect();
    let p = lay.names.len();
    let features = FeatureMatrix::new(
        sample_ids.clone(),
        lay.names,
        lay.modality,
        kinds,
        Tensor::matrix(n, p, values).expect("row-major draws"),
    )?;
    let raw: Vec<RawLabel> = (0..n)
        .map(|i| RawLabel {
            sample_id: sample_ids[i].clone(),
            response: if labels[i] == 1 { RESPONDER } else { NON_RESPONDER }.into(),
            tissue: spec.tissues[draws[i].tissue].clone(),
            pfs_time: Some(draws[i].time),
            pfs_event: Some(u8::from(draws[i].event)),
            split: None,
        })
        .collect();
    let cohort = encode_labels(&raw, Some(RESPONDER))?;
    let truth = TruthRecord {
        seed: spec.seed,
        sample_ids,
        clusters: labels.iter().map(|&y| usize::from(y) + 1).collect(),
        labels,
        informative_pathways: spec
            .pathways
            .iter()
            .filter(|p| p.effect != 0.0)
            .map(|p| p.name.clone())
            .collect(),
        pathway_names: spec.pathways.iter().map(|p| p.name.clone()).collect(),
        factors: draws.into_iter().map(|d| d.factors).collect(),
    };
    Ok(SynthCohort {
        features,
        cohort,
        gene_sets: lay.gene_sets,
        truth,
    })
}

/// Write the cohort as the TSV/JSON files the ingestion path reads, plus the
/// truth record.
pub fn write_cohort(cohort: &SynthCohort, paths: &SynthPaths) -> Result<(), SynthError> {
    write_feature_matrix(&cohort.features, &paths.features, &paths.schema)?;
    write_labels(&paths.labels, &cohort.cohort)?;
    write_gene_sets(&paths.gene_sets, &cohort.gene_sets)?;
    let mut truth = serde_json::to_string_pretty(&cohort.truth)?;
    truth.push('\n');
    write_atomic(&paths.truth, truth.as_bytes())?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<TruthRecord, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

//! Pipeline stages behind the subcommands. Each stage reads its inputs from
//! the configured data files or from artifacts of earlier stages in the
//! output directory, and writes its own artifacts atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bdvae_core::bdvae::{
    integrated_gradients, load_checkpoint, save_checkpoint, Architecture, BdvaeModel, Checkpoint, IgTarget,
};
use bdvae_core::cohort::{
    adjusted_rand_index, attribution_tests, classical_mds, correlation_cluster, correlation_distance,
    km_estimator, logrank_test, misaligned_samples, pathway_activity, permutation_importance, screen_latents,
    standardize_columns, summarize_clusters, KmCurve, LatentEmbedding, SurvivalRecord,
};
use bdvae_core::datamodel::{
    encode_labels, format_value, load_feature_matrix, load_labels, stratified_split, write_atomic, write_labels,
    CohortTable, FeatureMatrix, Split, Standardizer,
};
use bdvae_core::latalloc::{allocate_elbow, allocate_proportional, LatentAllocation};
use bdvae_core::maskspec::{compile_masks, load_gene_sets, MaskSet};
use bdvae_core::ndmath::Tensor;
use bdvae_core::objective::MmdKernelConfig;
use bdvae_core::stats::{auprc, bootstrap_ci, permutation_test_energy, permutation_test_mmd, roc_auc};
use bdvae_core::synthgen::{generate, write_cohort, SynthPaths};
use bdvae_core::trainer::{train, write_latents, EpochRecord, TrainData, TrainError, TrainObserver};
use serde::Serialize;

use crate::config::{AllocationMode, RunConfig, EFFECTIVE_CONFIG};
use crate::svg;

pub const MASKS: &str = "masks.json";
pub const MASK_WARNINGS: &str = "mask_warnings.txt";
pub const SPLITS: &str = "splits.tsv";
pub const STANDARDIZER: &str = "standardizer.json";
pub const ALLOCATION: &str = "allocation.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const LATENT_DIR: &str = "latents";
pub const METRICS: &str = "metrics.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const PREDICTIONS: &str = "predictions.tsv";
pub const EMBEDDING: &str = "embedding.tsv";
pub const LATENT_SCREEN: &str = "latent_screen.tsv";
pub const CLUSTERS: &str = "clusters.tsv";
pub const CLUSTER_SUMMARY: &str = "cluster_summary.tsv";
pub const LINKAGE: &str = "linkage.tsv";
pub const MDS: &str = "mds.tsv";
pub const MDS_SVG: &str = "mds.svg";
pub const PATHWAYS: &str = "pathway_activity.tsv";
pub const TWO_SAMPLE: &str = "two_sample.json";
pub const IMPORTANCE: &str = "importance.tsv";
pub const ATTRIBUTION: &str = "attribution.tsv";
pub const ANALYSIS: &str = "analysis.json";
pub const KM_TSV: &str = "km_curves.tsv";
pub const KM_SVG: &str = "km.svg";
pub const SURVIVAL: &str = "survival.json";
pub const MISALIGNED: &str = "misaligned.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Masks,
    Train,
    Eval,
    Analyze,
    Survival,
    Synth,
    All,
}

pub fn run(stage: Stage, cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join(EFFECTIVE_CONFIG), cfg.to_toml().as_bytes())?;
    match stage {
        Stage::Masks => stage_masks(cfg).map(drop),
        Stage::Train => stage_train(cfg),
        Stage::Eval => stage_eval(cfg),
        Stage::Analyze => stage_analyze(cfg),
        Stage::Survival => stage_survival(cfg),
        Stage::Synth => stage_synth(cfg),
        Stage::All => {
            stage_masks(cfg)?;
            stage_train(cfg)?;
            stage_eval(cfg)?;
            stage_analyze(cfg)?;
            stage_survival(cfg)
        }
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.output.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format_value(v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), fmt)
}

fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?
        .split('\t')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let r: Vec<String> = l.split('\t').map(|s| s.trim().to_string()).collect();
            if r.len() != header.len() {
                bail!("{} line {}: expected {} fields, got {}", path.display(), i + 2, header.len(), r.len());
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

// Synthetic cohorts.

fn stage_synth(cfg: &RunConfig) -> Result<()> {
    let cohort = generate(&cfg.synth)?;
    let p = &cfg.paths;
    for path in [&p.features, &p.schema, &p.labels, &p.gene_sets] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    write_cohort(
        &cohort,
        &SynthPaths {
            features: p.features.clone(),
            schema: p.schema.clone(),
            labels: p.labels.clone(),
            gene_sets: p.gene_sets.clone(),
            truth: p.truth_path(),
        },
    )?;
    Ok(())
}

// Masks.

fn stage_masks(cfg: &RunConfig) -> Result<MaskSet> {
    let matrix = load_feature_matrix(&cfg.paths.features, &cfg.paths.schema)?;
    let sets = load_gene_sets(&cfg.paths.gene_sets)?;
    let compiled = compile_masks(&sets, &matrix)?;
    compiled.masks.export(&out_path(cfg, MASKS))?;
    let mut warnings = compiled.warnings.join("\n");
    if !warnings.is_empty() {
        warnings.push('\n');
    }
    write_atomic(&out_path(cfg, MASK_WARNINGS), warnings.as_bytes())?;
    Ok(compiled.masks)
}

fn load_masks(cfg: &RunConfig) -> Result<MaskSet> {
    let path = out_path(cfg, MASKS);
    if path.exists() {
        Ok(MaskSet::load(&path)?)
    } else {
        stage_masks(cfg)
    }
}

// Data loading.

/// Raw matrix, labels aligned to it with a split assigned, and the
/// standardized model input.
pub struct Prepared {
    pub raw: FeatureMatrix,
    pub cohort: CohortTable,
    pub input: FeatureMatrix,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn rows(&self, split: Split) -> Vec<usize> {
        self.cohort.indices(split)
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<u8> {
        rows.iter().map(|&i| self.cohort.records[i].response).collect()
    }
}

fn load_cohort(cfg: &RunConfig, matrix: &FeatureMatrix) -> Result<CohortTable> {
    let raw = load_labels(&cfg.paths.labels)?;
    let table = encode_labels(&raw, cfg.data.positive_label.as_deref())?;
    Ok(table.aligned_to(matrix)?)
}

/// Loads the data, assigns a stratified split when the labels carry none and
/// fits the standardizer on the training rows. Writes the split table.
fn prepare_fresh(cfg: &RunConfig) -> Result<(Prepared, Vec<String>)> {
    let raw = load_feature_matrix(&cfg.paths.features, &cfg.paths.schema)?;
    let mut cohort = load_cohort(cfg, &raw)?;
    let mut warnings = Vec::new();
    if cohort.records.iter().any(|r| r.split.is_none()) {
        let outcome = stratified_split(&cohort, cfg.data.split, cfg.seed)?;
        cohort = outcome.cohort;
        warnings = outcome.warnings;
    }
    let train_rows = cohort.indices(Split::Train);
    if train_rows.is_empty() {
        bail!("the training split is empty");
    }
    let standardizer = Standardizer::fit(&raw, &train_rows);
    let input = standardizer.apply(&raw);
    write_labels(&out_path(cfg, SPLITS), &cohort)?;
    write_json(&out_path(cfg, STANDARDIZER), &standardizer)?;
    Ok((
        Prepared {
            raw,
            cohort,
            input,
            standardizer,
        },
        warnings,
    ))
}

/// Reloads the split and standardizer written by `train`.
fn prepare_trained(cfg: &RunConfig) -> Result<Prepared> {
    let raw = load_feature_matrix(&cfg.paths.features, &cfg.paths.schema)?;
    let split_path = out_path(cfg, SPLITS);
    let std_path = out_path(cfg, STANDARDIZER);
    if !split_path.exists() || !std_path.exists() {
        bail!("no trained run in {}; run `train` first", cfg.paths.output.display());
    }
    let labels = load_labels(&split_path)?;
    let cohort = encode_labels(&labels, Some("1"))?.aligned_to(&raw)?;
    let text = std::fs::read_to_string(&std_path)?;
    let standardizer: Standardizer = serde_json::from_str(&text).with_context(|| format!("parsing {}", std_path.display()))?;
    if standardizer.mean.len() != raw.n_features() {
        bail!("{} does not match the feature matrix", std_path.display());
    }
    let input = standardizer.apply(&raw);
    Ok(Prepared {
        raw,
        cohort,
        input,
        standardizer,
    })
}

fn load_model(cfg: &RunConfig, masks: &MaskSet) -> Result<Checkpoint> {
    let path = out_path(cfg, CHECKPOINT);
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.expect_masks(&masks.fingerprint())?;
    Ok(ckpt)
}

// Training.

struct Exporter<'a> {
    dir: PathBuf,
    ids: &'a [String],
    x: &'a Tensor,
}

impl TrainObserver for Exporter<'_> {
    fn on_epoch(&mut self, _record: &EpochRecord) {}

    fn on_latent_export(&mut self, epoch: usize, model: &BdvaeModel) -> Result<(), TrainError> {
        let (mu, _) = model.encode(self.x).map_err(TrainError::Model)?;
        let path = self.dir.join(format!("epoch_{epoch:05}.tsv"));
        write_latents(&path, self.ids, &model.arch.latent_names(), &mu)
    }
}

#[derive(Serialize)]
struct TrainSummary {
    n_features: usize,
    n_factors: usize,
    k: usize,
    parameters: usize,
    epochs_run: usize,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    aborted: Option<String>,
    split_sizes: [usize; 3],
    split_warnings: Vec<String>,
}

fn stage_train(cfg: &RunConfig) -> Result<()> {
    let masks = load_masks(cfg)?;
    let (prep, split_warnings) = prepare_fresh(cfg)?;
    let train_rows = prep.rows(Split::Train);
    let val_rows = prep.rows(Split::Val);
    if val_rows.is_empty() {
        bail!("the validation split is empty");
    }
    let latents = match cfg.allocation.mode {
        AllocationMode::Proportional => allocate_proportional(&masks.sizes(), cfg.allocation.k)?,
        AllocationMode::Elbow => allocate_elbow(prep.input.values(), &masks, &train_rows)?,
    };
    LatentAllocation {
        names: masks.names(),
        j: latents.clone(),
    }
    .export(&out_path(cfg, ALLOCATION))?;
    let arch = Architecture::new(&masks, &latents, &cfg.model)?;
    let model = BdvaeModel::init(arch, cfg.seed);
    let x = prep.input.values();
    let (x_train, x_val) = (x.select_rows(&train_rows), x.select_rows(&val_rows));
    let (y_train, y_val) = (prep.labels_of(&train_rows), prep.labels_of(&val_rows));
    let data = TrainData {
        x_train: &x_train,
        y_train: &y_train,
        x_val: &x_val,
        y_val: &y_val,
        kinds: prep.input.value_kind(),
    };
    let latent_dir = out_path(cfg, LATENT_DIR);
    std::fs::create_dir_all(&latent_dir)?;
    let mut exporter = Exporter {
        dir: latent_dir,
        ids: prep.input.sample_ids(),
        x,
    };
    let outcome = train(model, &data, &cfg.train, &mut exporter)?;
    write_atomic(&out_path(cfg, TRAINING_LOG), outcome.log.to_jsonl().as_bytes())?;
    let ckpt = Checkpoint {
        model: outcome.best.clone(),
        mask_fingerprint: masks.fingerprint(),
        epoch: outcome.best_epoch,
        config: cfg.model_echo(),
    };
    save_checkpoint(&out_path(cfg, CHECKPOINT), &ckpt)?;
    let summary = TrainSummary {
        n_features: masks.n_features,
        n_factors: masks.b(),
        k: outcome.best.arch.k(),
        parameters: outcome.best.n_params(),
        epochs_run: outcome.log.epochs.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        aborted: outcome.log.aborted.clone(),
        split_sizes: [train_rows.len(), val_rows.len(), prep.rows(Split::Test).len()],
        split_warnings,
    };
    write_json(&out_path(cfg, TRAIN_SUMMARY), &summary)
}

// Evaluation.

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub split: String,
    pub n: usize,
    pub n_positive: usize,
    pub auc: Option<f64>,
    pub auc_ci: Option<(f64, f64)>,
    pub auprc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub source: String,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    pub splits: Vec<SplitMetrics>,
}

pub fn score_metrics(name: &str, scores: &[f64], labels: &[u8], cfg: &RunConfig) -> SplitMetrics {
    let n_positive = labels.iter().filter(|&&y| y == 1).count();
    let auc = roc_auc(scores, labels).ok();
    let auc_ci = auc.and_then(|_| {
        bootstrap_ci(
            roc_auc,
            scores,
            labels,
            cfg.inference.bootstrap,
            cfg.inference.ci_level,
            cfg.seed,
        )
        .ok()
    });
    SplitMetrics {
        split: name.into(),
        n: labels.len(),
        n_positive,
        auc,
        auc_ci,
        auprc: auprc(scores, labels).ok(),
    }
}

fn metrics_rows(report: &MetricsReport) -> Vec<Vec<String>> {
    report
        .splits
        .iter()
        .map(|m| {
            vec![
                m.split.clone(),
                m.n.to_string(),
                m.n_positive.to_string(),
                fmt_opt(m.auc),
                fmt_opt(m.auc_ci.map(|c| c.0)),
                fmt_opt(m.auc_ci.map(|c| c.1)),
                fmt_opt(m.auprc),
            ]
        })
        .collect()
}

fn write_metrics(cfg: &RunConfig, report: &MetricsReport) -> Result<()> {
    write_json(&out_path(cfg, METRICS), report)?;
    write_tsv(
        &out_path(cfg, METRICS_TSV),
        &["split", "n", "n_positive", "auc", "auc_ci_low", "auc_ci_high", "auprc"],
        &metrics_rows(report),
    )
}

/// `sample_id<TAB>score` with a header row.
pub fn load_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let (header, rows) = read_tsv(path)?;
    let sid = header.iter().position(|h| h == "sample_id");
    let score = header.iter().position(|h| h == "score");
    let (Some(sid), Some(score)) = (sid, score) else {
        bail!("{} needs `sample_id` and `score` columns", path.display());
    };
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let v: f64 = r[score]
                .parse()
                .with_context(|| format!("{} line {}: bad score `{}`", path.display(), i + 2, r[score]))?;
            if !v.is_finite() {
                bail!("{} line {}: non-finite score", path.display(), i + 2);
            }
            Ok((r[sid].clone(), v))
        })
        .collect()
}

fn stage_eval(cfg: &RunConfig) -> Result<()> {
    if let Some(pred_path) = &cfg.paths.predictions {
        return eval_external(cfg, pred_path);
    }
    let masks = load_masks(cfg)?;
    let prep = prepare_trained(cfg)?;
    let ckpt = load_model(cfg, &masks)?;
    let logits = ckpt.model.predict_logits(prep.input.values())?;
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let rows = prep.rows(split);
        if rows.is_empty() {
            continue;
        }
        let scores: Vec<f64> = rows.iter().map(|&i| logits[i]).collect();
        splits.push(score_metrics(split.as_str(), &scores, &prep.labels_of(&rows), cfg));
    }
    let report = MetricsReport {
        source: "model".into(),
        ci_level: cfg.inference.ci_level,
        bootstrap_resamples: cfg.inference.bootstrap,
        splits,
    };
    write_metrics(cfg, &report)?;
    let rows: Vec<Vec<String>> = prep
        .cohort
        .records
        .iter()
        .zip(&logits)
        .map(|(r, s)| {
            vec![
                r.sample_id.clone(),
                r.split.map_or("NA", Split::as_str).into(),
                r.response.to_string(),
                fmt(*s),
            ]
        })
        .collect();
    write_tsv(&out_path(cfg, PREDICTIONS), &["sample_id", "split", "response", "logit"], &rows)
}

fn eval_external(cfg: &RunConfig, pred_path: &Path) -> Result<()> {
    let preds = load_predictions(pred_path)?;
    let raw = load_labels(&cfg.paths.labels)?;
    let table = encode_labels(&raw, cfg.data.positive_label.as_deref())?;
    let by_id: BTreeMap<&str, u8> = table
        .records
        .iter()
        .map(|r| (r.sample_id.as_str(), r.response))
        .collect();
    let mut scores = Vec::with_capacity(preds.len());
    let mut labels = Vec::with_capacity(preds.len());
    for (sid, s) in &preds {
        let y = by_id
            .get(sid.as_str())
            .with_context(|| format!("{}: no label for sample `{sid}`", pred_path.display()))?;
        scores.push(*s);
        labels.push(*y);
    }
    let report = MetricsReport {
        source: "external".into(),
        ci_level: cfg.inference.ci_level,
        bootstrap_resamples: cfg.inference.bootstrap,
        splits: vec![score_metrics("all", &scores, &labels, cfg)],
    };
    write_metrics(cfg, &report)
}

// Latent analysis.

#[derive(Serialize)]
struct TestSummary {
    statistic: f64,
    p_value: f64,
    n_permutations: usize,
}

#[derive(Serialize)]
struct AnalysisReport {
    n_samples: usize,
    n_latents: usize,
    retained_latents: Vec<String>,
    n_clusters: usize,
    clusters: Vec<bdvae_core::cohort::ClusterSummary>,
    constant_samples: Vec<String>,
    mds_clamped_eigenvalues: usize,
    /// Adjusted Rand index against the truth record, when one exists.
    ari_vs_truth: Option<f64>,
    pathways_retained: usize,
    pathways_top_by_delta: Vec<(String, f64)>,
    importance_base_auc: Option<f64>,
    notes: Vec<String>,
}

fn stage_analyze(cfg: &RunConfig) -> Result<()> {
    let masks = load_masks(cfg)?;
    let prep = prepare_trained(cfg)?;
    let ckpt = load_model(cfg, &masks)?;
    let model = &ckpt.model;
    let th = &cfg.analysis;
    let x = prep.input.values();
    let labels = prep.cohort.labels();
    let ids = prep.input.sample_ids().to_vec();
    let mut notes = Vec::new();

    let (mu, _) = model.encode(x)?;
    let latent_names = model.arch.latent_names();
    write_latents(&out_path(cfg, EMBEDDING), &ids, &latent_names, &mu)?;
    let emb = LatentEmbedding::new(ids.clone(), latent_names.clone(), mu)?;

    // Latent screening.
    let screen = screen_latents(&emb, &labels, th.fdr)?;
    let rows: Vec<Vec<String>> = screen
        .iter()
        .map(|s| vec![s.latent.clone(), fmt(s.u), fmt(s.p), fmt(s.q), s.retained.to_string()])
        .collect();
    write_tsv(&out_path(cfg, LATENT_SCREEN), &["latent", "u", "p", "q", "retained"], &rows)?;
    let keep: Vec<usize> = (0..screen.len()).filter(|&i| screen[i].retained).collect();
    let retained = emb.select_latents(&keep);

    // Clustering and MDS over the retained latents.
    let (cluster_labels, summaries, constant, clamped) = if keep.is_empty() {
        notes.push("no latent passed screening; all samples form one cluster and MDS is skipped".into());
        let assign = vec![1; ids.len()];
        write_tsv(&out_path(cfg, LINKAGE), &["step", "left", "right", "distance", "size"], &[])?;
        write_tsv(&out_path(cfg, MDS), &["sample_id", "mds1", "mds2", "cluster"], &[])?;
        let one = bdvae_core::cohort::ClusterAssignment {
            labels: assign.clone(),
            merges: Vec::new(),
            threshold: th.cluster_cut,
            constant_samples: Vec::new(),
        };
        (assign, summarize_clusters(&one, &labels), Vec::new(), 0)
    } else {
        let assign = correlation_cluster(&retained.values, th.cluster_cut)?;
        let linkage: Vec<Vec<String>> = assign
            .merges
            .iter()
            .enumerate()
            .map(|(s, m)| {
                vec![
                    (s + 1).to_string(),
                    m.left.to_string(),
                    m.right.to_string(),
                    fmt(m.distance),
                    m.size.to_string(),
                ]
            })
            .collect();
        write_tsv(&out_path(cfg, LINKAGE), &["step", "left", "right", "distance", "size"], &linkage)?;
        let (dist, _) = correlation_distance(&standardize_columns(&retained.values));
        let mds = classical_mds(&dist, 2)?;
        let rows: Vec<Vec<String>> = (0..ids.len())
            .map(|i| {
                vec![
                    ids[i].clone(),
                    fmt(mds.coords.get2(i, 0)),
                    fmt(mds.coords.get2(i, 1)),
                    assign.labels[i].to_string(),
                ]
            })
            .collect();
        write_tsv(&out_path(cfg, MDS), &["sample_id", "mds1", "mds2", "cluster"], &rows)?;
        let summaries = summarize_clusters(&assign, &labels);
        let names: Vec<String> = summaries.iter().map(|s| s.name.clone()).collect();
        write_atomic(
            &out_path(cfg, MDS_SVG),
            svg::scatter(&mds.coords, &assign.labels, &labels, &names).as_bytes(),
        )?;
        let constant = assign.constant_samples.iter().map(|&i| ids[i].clone()).collect();
        (assign.labels, summaries, constant, mds.clamped)
    };
    let rows: Vec<Vec<String>> = (0..ids.len())
        .map(|i| {
            let c = cluster_labels[i];
            vec![ids[i].clone(), c.to_string(), summaries[c - 1].name.clone()]
        })
        .collect();
    write_tsv(&out_path(cfg, CLUSTERS), &["sample_id", "cluster", "cluster_name"], &rows)?;
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| vec![s.label.to_string(), s.name.clone(), s.size.to_string(), fmt(s.responder_fraction)])
        .collect();
    write_tsv(
        &out_path(cfg, CLUSTER_SUMMARY),
        &["cluster", "name", "size", "responder_fraction"],
        &rows,
    )?;

    // Pathway activity over every factor's latents.
    let factor_cols: Vec<(String, Vec<usize>)> = model
        .arch
        .factors
        .iter()
        .zip(model.arch.latent_ranges())
        .map(|(f, r)| (f.name.clone(), r.collect()))
        .collect();
    let mut activity = pathway_activity(&emb, &factor_cols, &cluster_labels, th)?;
    let n_clusters = summaries.len();
    let mut header: Vec<String> = vec!["pathway".into()];
    header.extend(summaries.iter().map(|s| format!("median_{}", s.name)));
    header.extend(
        [
            "max_difference",
            "retained",
            "delta",
            "high_cluster",
            "low_cluster",
            "bold",
            "star",
        ]
        .map(String::from),
    );
    let rows: Vec<Vec<String>> = activity
        .iter()
        .map(|a| {
            let mut r = vec![a.pathway.clone()];
            r.extend(a.medians.iter().map(|m| fmt(*m)));
            r.extend([
                fmt(a.max_difference),
                a.retained.to_string(),
                fmt(a.delta),
                summaries[a.high_cluster - 1].name.clone(),
                summaries[a.low_cluster - 1].name.clone(),
                a.bold.to_string(),
                a.star.to_string(),
            ]);
            r
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    write_tsv(&out_path(cfg, PATHWAYS), &header_ref, &rows)?;
    let pathways_retained = activity.iter().filter(|a| a.retained).count();
    activity.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()).then(a.pathway.cmp(&b.pathway)));
    let top: Vec<(String, f64)> = activity.iter().take(10).map(|a| (a.pathway.clone(), a.delta)).collect();
    if n_clusters < 2 {
        notes.push("a single cluster leaves pathway contrasts undefined (δ = 0)".into());
    }

    // Responder vs non-responder latent distributions.
    let two_sample = two_sample_tests(cfg, &retained, &labels, &mut notes);
    write_json(&out_path(cfg, TWO_SAMPLE), &two_sample)?;

    // Permutation importance on the test split.
    let test_rows = prep.rows(Split::Test);
    let importance = if test_rows.is_empty() {
        notes.push("no test split; permutation importance skipped".into());
        None
    } else {
        match permutation_importance(
            model,
            &x.select_rows(&test_rows),
            &prep.labels_of(&test_rows),
            cfg.inference.importance_repeats,
            cfg.seed,
        ) {
            Ok(imp) => Some(imp),
            Err(e) => {
                notes.push(format!("permutation importance skipped: {e}"));
                None
            }
        }
    };
    let rows: Vec<Vec<String>> = importance
        .as_ref()
        .map(|imp| {
            let mut order: Vec<usize> = (0..imp.drops.len()).collect();
            order.sort_by(|&a, &b| imp.drops[b].total_cmp(&imp.drops[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .map(|k| vec![latent_names[k].clone(), fmt(imp.drops[k])])
                .collect()
        })
        .unwrap_or_default();
    write_tsv(&out_path(cfg, IMPORTANCE), &["latent", "auc_drop"], &rows)?;

    // Feature attributions across clusters.
    let rows = if n_clusters < 2 {
        Vec::new()
    } else {
        let baseline = vec![0.0; x.cols()];
        let attr = integrated_gradients(model, x, &baseline, IgTarget::Logit, cfg.inference.ig_steps)?;
        let tests = attribution_tests(&attr, prep.input.feature_names(), &cluster_labels, th)?;
        tests
            .iter()
            .map(|t| {
                vec![
                    t.feature.clone(),
                    fmt(t.h),
                    fmt(t.p),
                    fmt(t.q),
                    fmt(t.delta),
                    summaries[t.high_cluster - 1].name.clone(),
                    summaries[t.low_cluster - 1].name.clone(),
                    t.large.to_string(),
                ]
            })
            .collect()
    };
    write_tsv(
        &out_path(cfg, ATTRIBUTION),
        &["feature", "h", "p", "q", "delta", "high_cluster", "low_cluster", "large"],
        &rows,
    )?;

    let truth_path = cfg.paths.truth_path();
    let ari_vs_truth = if truth_path.exists() {
        let truth = bdvae_core::synthgen::load_truth(&truth_path)?;
        let by_id: BTreeMap<&str, usize> = truth
            .sample_ids
            .iter()
            .map(String::as_str)
            .zip(truth.clusters.iter().copied())
            .collect();
        let planted: Option<Vec<usize>> = ids.iter().map(|s| by_id.get(s.as_str()).copied()).collect();
        planted.map(|p| adjusted_rand_index(&cluster_labels, &p))
    } else {
        None
    };

    let report = AnalysisReport {
        n_samples: ids.len(),
        n_latents: latent_names.len(),
        retained_latents: retained.latent_names.clone(),
        n_clusters,
        clusters: summaries,
        constant_samples: constant,
        mds_clamped_eigenvalues: clamped,
        ari_vs_truth,
        pathways_retained,
        pathways_top_by_delta: top,
        importance_base_auc: importance.map(|i| i.base_auc),
        notes,
    };
    write_json(&out_path(cfg, ANALYSIS), &report)
}

#[derive(Serialize)]
struct TwoSample {
    latents: usize,
    n_responders: usize,
    n_nonresponders: usize,
    energy: Option<TestSummary>,
    mmd: Option<TestSummary>,
}

fn two_sample_tests(cfg: &RunConfig, retained: &LatentEmbedding, labels: &[u8], notes: &mut Vec<String>) -> TwoSample {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let mut out = TwoSample {
        latents: retained.latent_names.len(),
        n_responders: pos.len(),
        n_nonresponders: neg.len(),
        energy: None,
        mmd: None,
    };
    if out.latents == 0 {
        notes.push("no retained latents; two-sample tests skipped".into());
        return out;
    }
    let a = retained.values.select_rows(&pos);
    let b = retained.values.select_rows(&neg);
    let n = cfg.inference.permutations;
    let summary = |r: bdvae_core::stats::PermutationTestResult| TestSummary {
        statistic: r.statistic,
        p_value: r.p_value,
        n_permutations: r.n_permutations,
    };
    match permutation_test_energy(&a, &b, n, cfg.seed) {
        Ok(r) => out.energy = Some(summary(r)),
        Err(e) => notes.push(format!("energy test skipped: {e}")),
    }
    match permutation_test_mmd(&a, &b, &MmdKernelConfig::default(), n, cfg.seed) {
        Ok(r) => out.mmd = Some(summary(r)),
        Err(e) => notes.push(format!("MMD test skipped: {e}")),
    }
    out
}

// Survival.

#[derive(Serialize)]
struct GroupSurvival {
    cluster: String,
    n: usize,
    events: usize,
    median_survival: Option<f64>,
}

#[derive(Serialize)]
struct SurvivalReport {
    groups: Vec<GroupSurvival>,
    logrank: Option<bdvae_core::cohort::LogRank>,
    misaligned: Option<bdvae_core::cohort::MisalignedReport>,
    notes: Vec<String>,
}

fn median_survival(curve: &KmCurve) -> Option<f64> {
    curve.points.iter().find(|p| p.survival <= 0.5).map(|p| p.time)
}

fn stage_survival(cfg: &RunConfig) -> Result<()> {
    let clusters_path = out_path(cfg, CLUSTERS);
    if !clusters_path.exists() {
        bail!("no cluster assignment in {}; run `analyze` first", cfg.paths.output.display());
    }
    let (header, rows) = read_tsv(&clusters_path)?;
    if header != ["sample_id", "cluster", "cluster_name"] {
        bail!("{} has an unexpected header", clusters_path.display());
    }
    let raw = load_labels(&out_path(cfg, SPLITS)).or_else(|_| load_labels(&cfg.paths.labels))?;
    let table = encode_labels(&raw, Some("1")).or_else(|_| encode_labels(&raw, cfg.data.positive_label.as_deref()))?;
    let by_id: BTreeMap<&str, &bdvae_core::datamodel::SampleRecord> =
        table.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();

    let mut groups: BTreeMap<usize, (String, Vec<SurvivalRecord>)> = BTreeMap::new();
    let mut notes = Vec::new();
    let mut missing = 0;
    for r in &rows {
        let c: usize = r[1].parse().with_context(|| format!("bad cluster label `{}`", r[1]))?;
        let rec = by_id
            .get(r[0].as_str())
            .with_context(|| format!("no label for clustered sample `{}`", r[0]))?;
        let entry = groups.entry(c).or_insert_with(|| (r[2].clone(), Vec::new()));
        match (rec.pfs_time, rec.pfs_event) {
            (Some(time), Some(event)) => entry.1.push(SurvivalRecord { time, event: event == 1 }),
            _ => missing += 1,
        }
    }
    if missing > 0 {
        notes.push(format!("{missing} samples without PFS were left out"));
    }
    groups.retain(|_, g| !g.1.is_empty());

    let mut curves = Vec::new();
    let mut summary = Vec::new();
    let mut km_rows = Vec::new();
    for (name, recs) in groups.values() {
        let curve = km_estimator(recs)?;
        for p in &curve.points {
            km_rows.push(vec![
                name.clone(),
                fmt(p.time),
                fmt(p.survival),
                p.at_risk.to_string(),
                p.events.to_string(),
                p.censored.to_string(),
            ]);
        }
        summary.push(GroupSurvival {
            cluster: name.clone(),
            n: recs.len(),
            events: recs.iter().filter(|r| r.event).count(),
            median_survival: median_survival(&curve),
        });
        curves.push((name.clone(), curve));
    }
    write_tsv(
        &out_path(cfg, KM_TSV),
        &["cluster", "time", "survival", "at_risk", "events", "censored"],
        &km_rows,
    )?;
    write_atomic(&out_path(cfg, KM_SVG), svg::km_plot(&curves).as_bytes())?;

    let logrank = if groups.len() >= 2 {
        let g: Vec<Vec<SurvivalRecord>> = groups.values().map(|g| g.1.clone()).collect();
        Some(logrank_test(&g)?)
    } else {
        notes.push("fewer than two clusters with PFS; log-rank skipped".into());
        None
    };

    let with_pfs: Vec<_> = table
        .records
        .iter()
        .filter(|r| r.pfs_time.is_some())
        .cloned()
        .collect();
    let misaligned = if with_pfs.is_empty() {
        None
    } else {
        Some(misaligned_samples(&with_pfs, cfg.analysis.misalign_low, cfg.analysis.misalign_high)?)
    };
    let mut rows = Vec::new();
    if let Some(m) = &misaligned {
        rows.extend(m.responders.iter().map(|s| vec![s.clone(), "responder".into()]));
        rows.extend(m.nonresponders.iter().map(|s| vec![s.clone(), "non_responder".into()]));
    }
    write_tsv(&out_path(cfg, MISALIGNED), &["sample_id", "class"], &rows)?;

    write_json(
        &out_path(cfg, SURVIVAL),
        &SurvivalReport {
            groups: summary,
            logrank,
            misaligned,
            notes,
        },
    )
}

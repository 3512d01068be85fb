//! Run configuration: one TOML file drives every subcommand.

use std::path::{Path, PathBuf};

use bdvae_core::bdvae::ModelConfig;
use bdvae_core::cohort::AnalysisThresholds;
use bdvae_core::synthgen::SynthSpec;
use bdvae_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field} = {value} is out of range: must be {bound}")]
    Range {
        field: String,
        value: String,
        bound: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub features: PathBuf,
    pub schema: PathBuf,
    pub labels: PathBuf,
    pub gene_sets: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// External `sample_id<TAB>score` file; when set, `eval` scores it instead
    /// of the trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Truth record written by `synth`; defaults to `truth.json` next to the labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Paths {
    pub fn truth_path(&self) -> PathBuf {
        self.truth.clone().unwrap_or_else(|| {
            self.labels
                .parent()
                .unwrap_or_else(|| Path::new(""))
                .join("truth.json")
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Response category treated as y = 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
    /// Train / validation / test fractions, used when the labels carry no split.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            positive_label: None,
            split: [0.64, 0.16, 0.20],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    Proportional,
    Elbow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub mode: AllocationMode,
    /// Latent budget for proportional allocation.
    pub k: usize,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig {
            mode: AllocationMode::Proportional,
            k: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub permutations: usize,
    pub bootstrap: usize,
    pub ci_level: f64,
    pub importance_repeats: usize,
    pub ig_steps: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            permutations: 1000,
            bootstrap: 1000,
            ci_level: 0.95,
            importance_repeats: 10,
            ig_steps: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub allocation: AllocationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisThresholds,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub synth: SynthSpec,
}

fn range(field: &str, value: impl ToString, bound: &str) -> ConfigError {
    ConfigError::Range {
        field: field.into(),
        value: value.to_string(),
        bound: bound.into(),
    }
}

impl RunConfig {
    /// Parse and validate a TOML document. Relative paths are resolved
    /// against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string().trim_end().into(),
        })?;
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            return Err(ConfigError::Invalid(
                "train.seed is derived from the top-level seed; set `seed` instead".into(),
            ));
        }
        cfg.set_seed(cfg.seed);
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let abs = std::path::absolute(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let base = abs.parent().unwrap_or_else(|| Path::new("/"));
        RunConfig::parse(&text, &path.display().to_string(), base)
    }

    /// The top-level seed drives splitting, initialization, training, the
    /// permutation tests and synthetic generation.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.features, &mut p.schema, &mut p.labels, &mut p.gene_sets, &mut p.output] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        for path in [&mut p.predictions, &mut p.truth].into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(range("seed", self.seed, "at most 9223372036854775807"));
        }
        let s = &self.data.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(range("data.split", format!("{s:?}"), "three fractions in [0, 1] summing to 1"));
        }
        if s[0] == 0.0 || s[1] == 0.0 {
            return Err(range("data.split", format!("{s:?}"), "nonzero train and validation fractions"));
        }
        if self.allocation.mode == AllocationMode::Proportional && self.allocation.k == 0 {
            return Err(range("allocation.k", 0, "at least 1"));
        }
        self.analysis.validate().map_err(|e| match e {
            bdvae_core::cohort::CohortError::Threshold { name, value, range: bound } => {
                range(&format!("analysis.{name}"), value, bound)
            }
            other => ConfigError::Invalid(other.to_string()),
        })?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        let inf = &self.inference;
        if inf.permutations < 100 {
            return Err(range("inference.permutations", inf.permutations, "at least 100"));
        }
        if inf.bootstrap < 100 {
            return Err(range("inference.bootstrap", inf.bootstrap, "at least 100"));
        }
        if !(inf.ci_level > 0.0 && inf.ci_level < 1.0) {
            return Err(range("inference.ci_level", inf.ci_level, "in (0, 1)"));
        }
        if inf.importance_repeats == 0 {
            return Err(range("inference.importance_repeats", 0, "at least 1"));
        }
        if inf.ig_steps < 8 {
            return Err(range("inference.ig_steps", inf.ig_steps, "at least 8"));
        }
        self.synth
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("synth: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Everything that shapes the model, without filesystem locations, so
    /// checkpoints do not depend on where a run writes.
    pub fn model_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "allocation": self.allocation,
            "model": self.model,
            "train": self.train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
features = "data/features.tsv"
schema = "data/schema.json"
labels = "data/labels.tsv"
gene_sets = "data/gene_sets.json"
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, "test.toml", Path::new("/base"))
    }

    #[test]
    fn minimal_config_gets_default_thresholds() {
        let c = parse(MINIMAL).unwrap();
        let a = &c.analysis;
        assert_eq!(
            [a.fdr, a.activity, a.delta_gene, a.delta_bold, a.delta_star, a.misalign_low, a.misalign_high],
            [0.05, 0.03, 0.33, 0.47, 0.7, 0.05, 0.95]
        );
        assert_eq!(c.paths.features, PathBuf::from("/base/data/features.tsv"));
        assert_eq!(c.paths.output, PathBuf::from("/base/out"));
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn out_of_range_threshold_names_the_bound() {
        let e = parse(&format!("{MINIMAL}\n[analysis]\nfdr = 1.5\n")).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, ConfigError::Range { .. }), "{msg}");
        assert!(msg.contains("analysis.fdr") && msg.contains("1.5") && msg.contains("(0, 1)"), "{msg}");
    }

    #[test]
    fn duplicate_key_reports_location() {
        let e = parse(&format!("seed = 1\nseed = 2\n{MINIMAL}")).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, ConfigError::Parse { .. }));
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["\n[analysis]\nfrd = 0.1\n", "\n[train]\nepochz = 3\n", "\nsede = 1\n"] {
            let e = parse(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(e.to_string().contains("unknown field"), "{e}");
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let text = format!(
            "seed = 9\n{MINIMAL}predictions = \"p.tsv\"\n[allocation]\nmode = \"elbow\"\n[train]\nepochs = 7\nlr_vae = 0.003\n[model]\ndecoder_head = \"linear\"\n[analysis]\ncluster_cut = 0.8\n"
        );
        let c = parse(&text).unwrap();
        assert_eq!(c.train.seed, 9);
        let echo = c.to_toml();
        let again = RunConfig::parse(&echo, "echo", Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml(), echo);
    }

    #[test]
    fn conflicting_train_seed_is_rejected() {
        let e = parse(&format!("seed = 1\n{MINIMAL}[train]\nseed = 2\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
    }

    #[test]
    fn other_ranges() {
        for (extra, field) in [
            ("[data]\nsplit = [0.5, 0.5, 0.5]\n", "data.split"),
            ("[allocation]\nk = 0\n", "allocation.k"),
            ("[inference]\npermutations = 10\n", "inference.permutations"),
            ("[analysis]\ncluster_cut = 3.0\n", "analysis.cluster_cut"),
        ] {
            let e = parse(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(e.to_string().contains(field), "{e}");
        }
    }
}

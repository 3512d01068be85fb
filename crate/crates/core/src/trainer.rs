//! Minibatch training with two AdamW optimizers, joint gradient clipping,
//! a plateau scheduler on validation loss and best-checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdvae::{BdvaeModel, ModelError, INPUT_LEAF, NOISE_LEAF};
use crate::datamodel::{format_value, write_atomic, DataError, ValueKind};
use crate::ndmath::{Graph, MathError, Tensor};
use crate::objective::{
    build_loss, LossBreakdown, LossError, LossWeights, MmdEstimator, MmdKernelConfig, PRIOR_LEAF,
    TARGET_LEAF,
};
use crate::stats::roc_auc;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
/// Offset mixed into the seed for the fixed validation prior draw.
const VAL_PRIOR_STREAM: u64 = 0x7661_6c5f_7072_696f;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Io(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_vae: f64,
    pub lr_cls: f64,
    pub weight_decay_vae: f64,
    pub weight_decay_cls: f64,
    pub clip_norm: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_min_delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub mmd: MmdKernelConfig,
    /// 0 disables latent export.
    pub latent_export_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_vae: 1e-3,
            lr_cls: 1e-3,
            weight_decay_vae: 0.0,
            weight_decay_cls: 1e-4,
            clip_norm: 1.0,
            plateau_patience: 20,
            plateau_factor: 0.5,
            plateau_min_delta: 0.0,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
            mmd: MmdKernelConfig::default(),
            latent_export_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr_vae) || !positive(self.lr_cls) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay_vae >= 0.0 && self.weight_decay_cls >= 0.0) {
            return bad("weight decay must be nonnegative");
        }
        if !positive(self.clip_norm) {
            return bad("clip_norm must be positive");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.plateau_min_delta >= 0.0) {
            return bad("plateau_min_delta must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.mmd.estimator != MmdEstimator::Biased {
            return bad("training uses the biased MMD estimator only");
        }
        self.weights.validate()?;
        self.mmd.validate()?;
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied before the adaptive step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] * shrink - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once the monitored value has gone
/// `patience` consecutive epochs without improving by more than `min_delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_delta: f64) -> Self {
        Self {
            patience,
            factor,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns the multiplier to apply to the learning rate.
    pub fn observe(&mut self, value: f64) -> f64 {
        if value < self.best - self.min_delta {
            self.best = value;
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return self.factor;
        }
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auc: Option<f64>,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub lr_vae: f64,
    pub lr_cls: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Set when training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

pub struct TrainData<'a> {
    pub x_train: &'a Tensor,
    pub y_train: &'a [u8],
    pub x_val: &'a Tensor,
    pub y_val: &'a [u8],
    pub kinds: &'a [ValueKind],
}

impl TrainData<'_> {
    fn validate(&self, model: &BdvaeModel) -> Result<(), TrainError> {
        let x = model.arch.n_features;
        let bad = |m: String| Err(TrainError::Data(m));
        if self.x_train.rows() == 0 || self.x_val.rows() == 0 {
            return bad("train and validation splits must be non-empty".into());
        }
        if self.x_train.cols() != x || self.x_val.cols() != x || self.kinds.len() != x {
            return bad(format!("inputs must have {x} feature columns"));
        }
        if self.y_train.len() != self.x_train.rows() || self.y_val.len() != self.x_val.rows() {
            return bad("label count does not match rows".into());
        }
        if self.y_train.iter().chain(self.y_val).any(|&y| y > 1) {
            return bad("labels must be 0 or 1".into());
        }
        Ok(())
    }
}

/// Hooks called during training. Both default to no-ops.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    /// Called at every epoch that is a multiple of `latent_export_every`.
    fn on_latent_export(&mut self, _epoch: usize, _model: &BdvaeModel) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss, or the
    /// initial model if no epoch completed.
    pub best: BdvaeModel,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub last: BdvaeModel,
    pub log: TrainingLog,
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn label_column(y: &[u8]) -> Tensor {
    Tensor::matrix(y.len(), 1, y.iter().map(|&v| v as f64).collect()).expect("shape")
}

fn auc_or_none(scores: &[f64], labels: &[u8]) -> Option<f64> {
    roc_auc(scores, labels).ok()
}

struct LossGraph {
    graph: Graph,
    logit: crate::ndmath::NodeId,
    rec: crate::ndmath::NodeId,
    mmd: crate::ndmath::NodeId,
    resp: crate::ndmath::NodeId,
    total: crate::ndmath::NodeId,
}

impl LossGraph {
    fn new(model: &BdvaeModel, cfg: &TrainConfig, kinds: &[ValueKind], stochastic: bool) -> Self {
        let mut graph = Graph::new();
        let f = model.arch.build_forward(&mut graph, stochastic);
        let l = build_loss(
            &mut graph,
            f.x,
            f.x_hat,
            f.z,
            f.logit,
            kinds,
            model.arch.k(),
            &cfg.weights,
            &cfg.mmd,
        );
        Self {
            graph,
            logit: f.logit,
            rec: l.rec,
            mmd: l.mmd,
            resp: l.resp,
            total: l.total,
        }
    }
}

/// Deterministic (z = μ) loss breakdown and logits on a fixed prior draw.
pub fn evaluate_loss(
    model: &BdvaeModel,
    x: &Tensor,
    y: &[u8],
    prior: &Tensor,
    cfg: &TrainConfig,
    kinds: &[ValueKind],
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let lg = LossGraph::new(model, cfg, kinds, false);
    let yt = label_column(y);
    let mut b = model.bindings();
    b.set_ref(INPUT_LEAF, x);
    b.set_ref(PRIOR_LEAF, prior);
    b.set_ref(TARGET_LEAF, &yt);
    let eval = lg.graph.evaluate(&b)?;
    let breakdown = LossBreakdown {
        rec: eval.value(lg.rec).item(),
        mmd: eval.value(lg.mmd).item(),
        resp: eval.value(lg.resp).item(),
        total: eval.value(lg.total).item(),
    };
    Ok((breakdown, eval.value(lg.logit).data().to_vec()))
}

/// Trains `model` and returns the best-validation-loss parameters together
/// with the final parameters and the per-epoch log. A non-finite value stops
/// training; the outcome then carries the best model seen so far and the
/// reason in `log.aborted`.
pub fn train(
    model: BdvaeModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    data.validate(&model)?;
    let k = model.arch.k();
    let split = model
        .names()
        .iter()
        .position(|n| n.starts_with("cls."))
        .unwrap_or(model.names().len());

    let mut model = model;
    let mut opt_vae = AdamW::new(&model.params()[..split], cfg.lr_vae, cfg.weight_decay_vae);
    let mut opt_cls = AdamW::new(&model.params()[split..], cfg.lr_cls, cfg.weight_decay_cls);
    let mut sched = PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_min_delta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_prior = {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_PRIOR_STREAM);
        standard_normal(&mut r, data.x_val.rows(), k)
    };
    let lg = LossGraph::new(&model, cfg, data.kinds, true);
    let leaf_ids: Vec<_> = model
        .names()
        .iter()
        .map(|n| lg.graph.leaf_id(n).expect("parameter leaf"))
        .collect();

    let mut log = TrainingLog::default();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_val = None;
    let n_train = data.x_train.rows();
    let mut order: Vec<usize> = (0..n_train).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        let mut seen_logits = Vec::with_capacity(n_train);
        let mut seen_labels = Vec::with_capacity(n_train);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = data.x_train.select_rows(chunk);
            let yb: Vec<u8> = chunk.iter().map(|&i| data.y_train[i]).collect();
            let yt = label_column(&yb);
            let eps = standard_normal(&mut rng, chunk.len(), k);
            let prior = standard_normal(&mut rng, chunk.len(), k);
            let mut b = model.bindings();
            b.set_ref(INPUT_LEAF, &xb);
            b.set_ref(NOISE_LEAF, &eps);
            b.set_ref(PRIOR_LEAF, &prior);
            b.set_ref(TARGET_LEAF, &yt);
            let step = lg
                .graph
                .evaluate(&b)
                .and_then(|eval| lg.graph.backward(&eval, lg.total).map(|gr| (eval, gr)));
            let (eval, grads) = match step {
                Ok(v) => v,
                Err(e @ MathError::NonFinite { .. }) => {
                    log.aborted = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let mut g: Vec<Tensor> = leaf_ids
                .iter()
                .zip(model.params())
                .map(|(&id, p)| grads.node(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if !g.iter().all(Tensor::all_finite) {
                log.aborted = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            batch_losses.push(eval.value(lg.total).item());
            seen_logits.extend_from_slice(eval.value(lg.logit).data());
            seen_labels.extend_from_slice(&yb);
            drop(b);
            clip_global_norm(&mut g, cfg.clip_norm);
            let (p_vae, p_cls) = model.params_mut().split_at_mut(split);
            opt_vae.step(p_vae, &g[..split]);
            opt_cls.step(p_cls, &g[split..]);
        }

        let (val, val_logits) = match evaluate_loss(&model, data.x_val, data.y_val, &val_prior, cfg, data.kinds) {
            Ok(v) => v,
            Err(TrainError::Math(e @ MathError::NonFinite { .. })) => {
                log.aborted = Some(format!("epoch {epoch}: validation {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            train_auc: auc_or_none(&seen_logits, &seen_labels),
            val_loss: val.total,
            val_auc: auc_or_none(&val_logits, data.y_val),
            lr_vae: opt_vae.lr,
            lr_cls: opt_cls.lr,
        };
        if best_val.is_none_or(|b| val.total < b) {
            best_val = Some(val.total);
            best_epoch = Some(epoch);
            best = model.clone();
        }
        let factor = sched.observe(val.total);
        opt_vae.lr *= factor;
        opt_cls.lr *= factor;
        observer.on_epoch(&record);
        log.epochs.push(record);
        if cfg.latent_export_every > 0 && epoch % cfg.latent_export_every == 0 {
            observer.on_latent_export(epoch, &model)?;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss: best_val,
        last: model,
        log,
    })
}

/// Writes posterior means as TSV: `sample_id` then one column per latent.
pub fn write_latents(path: &Path, sample_ids: &[String], names: &[String], mu: &Tensor) -> Result<(), TrainError> {
    let mut out = String::from("sample_id");
    for n in names {
        out.push('\t');
        out.push_str(n);
    }
    out.push('\n');
    for (i, id) in sample_ids.iter().enumerate() {
        out.push_str(id);
        for v in mu.row(i) {
            out.push('\t');
            out.push_str(&format_value(*v));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests;

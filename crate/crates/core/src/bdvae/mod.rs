//! The masked encoder bank, shared decoder and response classifier.
//!
//! Parameters are stored by name (`enc.{i}.w_h`, `dec.w1`, `cls.w2`, ...)
//! with weights laid out `[out, in]`; the same names are used as graph leaves.

mod checkpoint;
mod ig;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::maskspec::MaskSet;
use crate::ndmath::{leaky_relu, Bindings, Graph, MathError, NodeId, Tensor, DEFAULT_LEAKY_SLOPE};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use ig::{integrated_gradients, IgTarget};

pub const INPUT_LEAF: &str = "x";
pub const NOISE_LEAF: &str = "eps";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("allocation has {alloc} entries but the mask set has {masks}")]
    AllocationMismatch { alloc: usize, masks: usize },
    #[error("factor `{0}` has an empty mask")]
    EmptyFactor(String),
    #[error("factor `{0}` needs at least one latent")]
    ZeroLatent(String),
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("integrated gradients needs at least 8 steps, got {0}")]
    TooFewSteps(usize),
    #[error("latent index {0} out of range")]
    LatentIndex(usize),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Output layer chain of the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHead {
    /// Linear → LeakyReLU → Softplus → Sigmoid (the reference head).
    #[default]
    Paper,
    SigmoidOnly,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub leaky_slope: f64,
    pub hidden_divisor: usize,
    pub hidden_cap: usize,
    /// Decoder hidden width; `None` means ceil((K + X) / 2).
    pub decoder_hidden: Option<usize>,
    /// Classifier hidden width; `None` means ceil(K / 2).
    pub classifier_hidden: Option<usize>,
    pub decoder_head: DecoderHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            hidden_divisor: 16,
            hidden_cap: 256,
            decoder_hidden: None,
            classifier_hidden: None,
            decoder_head: DecoderHead::Paper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub indices: Vec<usize>,
    pub hidden: usize,
    pub latent: usize,
}

/// Layer sizes only; cheap to build at any scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_features: usize,
    pub factors: Vec<FactorSpec>,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    pub leaky_slope: f64,
    pub decoder_head: DecoderHead,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
    pub classifier: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.classifier
    }
}

fn linear_count(inp: usize, out: usize) -> usize {
    inp * out + out
}

impl Architecture {
    pub fn new(masks: &MaskSet, latents: &[usize], cfg: &ModelConfig) -> Result<Self, ModelError> {
        if latents.len() != masks.entries.len() {
            return Err(ModelError::AllocationMismatch {
                alloc: latents.len(),
                masks: masks.entries.len(),
            });
        }
        let mut factors = Vec::with_capacity(latents.len());
        for (e, &j) in masks.entries.iter().zip(latents) {
            if e.indices.is_empty() {
                return Err(ModelError::EmptyFactor(e.name.clone()));
            }
            if j == 0 {
                return Err(ModelError::ZeroLatent(e.name.clone()));
            }
            factors.push(FactorSpec {
                name: e.name.clone(),
                indices: e.indices.clone(),
                hidden: factor_hidden(e.indices.len(), j, cfg),
                latent: j,
            });
        }
        let k: usize = latents.iter().sum();
        let x = masks.n_features;
        Ok(Self {
            n_features: x,
            factors,
            decoder_hidden: cfg.decoder_hidden.unwrap_or((k + x).div_ceil(2)),
            classifier_hidden: cfg.classifier_hidden.unwrap_or(k.div_ceil(2)).max(1),
            leaky_slope: cfg.leaky_slope,
            decoder_head: cfg.decoder_head,
        })
    }

    pub fn k(&self) -> usize {
        self.factors.iter().map(|f| f.latent).sum()
    }

    /// Column range of each factor inside Z.
    pub fn latent_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.factors
            .iter()
            .map(|f| {
                let r = start..start + f.latent;
                start += f.latent;
                r
            })
            .collect()
    }

    /// `factor_name.index` for every latent column.
    pub fn latent_names(&self) -> Vec<String> {
        self.factors
            .iter()
            .flat_map(|f| (0..f.latent).map(move |i| format!("{}.{i}", f.name)))
            .collect()
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (i, f) in self.factors.iter().enumerate() {
            let (d, h, j) = (f.indices.len(), f.hidden, f.latent);
            v.push((format!("enc.{i}.w_h"), vec![h, d]));
            v.push((format!("enc.{i}.b_h"), vec![h]));
            v.push((format!("enc.{i}.w_mu"), vec![j, h]));
            v.push((format!("enc.{i}.b_mu"), vec![j]));
            v.push((format!("enc.{i}.w_lv"), vec![j, h]));
            v.push((format!("enc.{i}.b_lv"), vec![j]));
        }
        let (k, x, hd, hc) = (self.k(), self.n_features, self.decoder_hidden, self.classifier_hidden);
        v.push(("dec.w1".into(), vec![hd, k]));
        v.push(("dec.b1".into(), vec![hd]));
        v.push(("dec.w2".into(), vec![x, hd]));
        v.push(("dec.b2".into(), vec![x]));
        v.push(("cls.w1".into(), vec![hc, k]));
        v.push(("cls.b1".into(), vec![hc]));
        v.push(("cls.w2".into(), vec![1, hc]));
        v.push(("cls.b2".into(), vec![1]));
        v
    }

    pub fn param_count(&self) -> ParamCount {
        let encoder = self
            .factors
            .iter()
            .map(|f| {
                linear_count(f.indices.len(), f.hidden) + 2 * linear_count(f.hidden, f.latent)
            })
            .sum();
        let (k, x) = (self.k(), self.n_features);
        if self.factors.is_empty() {
            return ParamCount::default();
        }
        ParamCount {
            encoder,
            decoder: linear_count(k, self.decoder_hidden) + linear_count(self.decoder_hidden, x),
            classifier: linear_count(k, self.classifier_hidden) + linear_count(self.classifier_hidden, 1),
        }
    }

    /// Adds the forward pass to `g`. With `stochastic`, `z = μ + exp(logvar/2) ⊙ ε`
    /// reads ε from the `eps` leaf; otherwise `z = μ`.
    pub fn build_forward(&self, g: &mut Graph, stochastic: bool) -> ForwardNodes {
        let x = g.input(INPUT_LEAF);
        let slope = self.leaky_slope;
        let mut mus = Vec::with_capacity(self.factors.len());
        let mut lvs = Vec::with_capacity(self.factors.len());
        for (i, f) in self.factors.iter().enumerate() {
            let p = |s: &str| format!("enc.{i}.{s}");
            let xi = g.gather(x, f.indices.clone());
            let (wh, bh) = (g.parameter(&p("w_h")), g.parameter(&p("b_h")));
            let pre = g.linear(xi, wh, bh);
            let h = g.leaky_relu(pre, slope);
            let (wm, bm) = (g.parameter(&p("w_mu")), g.parameter(&p("b_mu")));
            let (wl, bl) = (g.parameter(&p("w_lv")), g.parameter(&p("b_lv")));
            let mu = g.linear(h, wm, bm);
            let lv = g.linear(h, wl, bl);
            mus.push(g.label(mu, &format!("{}.mu", f.name)));
            lvs.push(g.label(lv, &format!("{}.logvar", f.name)));
        }
        let mu = g.concat(mus.clone());
        let logvar = g.concat(lvs.clone());
        let z = if stochastic {
            let eps = g.input(NOISE_LEAF);
            let half = g.scale(logvar, 0.5);
            let sd = g.exp(half);
            let noise = g.mul(sd, eps);
            g.add(mu, noise)
        } else {
            mu
        };

        let (w1, b1) = (g.parameter("dec.w1"), g.parameter("dec.b1"));
        let (w2, b2) = (g.parameter("dec.w2"), g.parameter("dec.b2"));
        let a1 = g.linear(z, w1, b1);
        let h1 = g.leaky_relu(a1, slope);
        let out = g.linear(h1, w2, b2);
        let x_hat = match self.decoder_head {
            DecoderHead::Paper => {
                let a = g.leaky_relu(out, slope);
                let s = g.softplus(a);
                g.sigmoid(s)
            }
            DecoderHead::SigmoidOnly => g.sigmoid(out),
            DecoderHead::Linear => out,
        };

        let (c1, cb1) = (g.parameter("cls.w1"), g.parameter("cls.b1"));
        let (c2, cb2) = (g.parameter("cls.w2"), g.parameter("cls.b2"));
        let ca = g.linear(z, c1, cb1);
        let ch = g.leaky_relu(ca, slope);
        let logit = g.linear(ch, c2, cb2);
        ForwardNodes {
            x,
            mu,
            logvar,
            z,
            x_hat,
            logit,
            factor_mu: mus,
            factor_logvar: lvs,
        }
    }
}

fn factor_hidden(width: usize, latent: usize, cfg: &ModelConfig) -> usize {
    latent
        .max(width.div_ceil(cfg.hidden_divisor.max(1)))
        .min(cfg.hidden_cap.max(1))
        .max(1)
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub x: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub x_hat: NodeId,
    /// `[B, 1]` logits.
    pub logit: NodeId,
    pub factor_mu: Vec<NodeId>,
    pub factor_logvar: Vec<NodeId>,
}

/// Batch forward outputs; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
    pub x_hat: Tensor,
    /// Length-B vector.
    pub logit: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdvaeModel {
    pub arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl BdvaeModel {
    /// Kaiming-uniform weights for layers feeding a LeakyReLU, U(±1/√fan_in)
    /// for the plain linear heads, zero biases and a zero log-variance head.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope)).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let len: usize = shape.iter().product();
            let is_weight = shape.len() == 2;
            let zero = !is_weight || name.ends_with("w_lv");
            let data = if zero {
                vec![0.0; len]
            } else {
                let fan_in = shape[1] as f64;
                let feeds_leaky = name.ends_with("w_h")
                    || name == "dec.w1"
                    || name == "dec.w2"
                    || name == "cls.w1";
                let bound = if feeds_leaky {
                    gain * (3.0 / fan_in).sqrt()
                } else {
                    1.0 / fan_in.sqrt()
                };
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data).expect("shape from architecture"));
        }
        Self { arch, names, params }
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_parts(arch: Architecture, names: Vec<String>, params: Vec<Tensor>) -> Self {
        Self { arch, names, params }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Bindings borrowing every parameter.
    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            b.set_ref(n.clone(), p);
        }
        b
    }

    fn check_width(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.rank() != 2 || x.cols() != self.arch.n_features {
            return Err(ModelError::InputWidth {
                got: x.cols(),
                expected: self.arch.n_features,
            });
        }
        Ok(())
    }

    /// Batch forward pass. `noise` (`[B, K]` standard-normal draws) selects the
    /// stochastic path; `None` uses z = μ.
    pub fn forward(&self, x: &Tensor, noise: Option<&Tensor>) -> Result<ForwardResult, ModelError> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let nodes = self.arch.build_forward(&mut g, noise.is_some());
        let mut b = self.bindings();
        b.set_ref(INPUT_LEAF, x);
        if let Some(eps) = noise {
            b.set_ref(NOISE_LEAF, eps);
        }
        let eval = g.evaluate(&b)?;
        let logit = eval.value(nodes.logit).clone();
        let n = logit.rows();
        Ok(ForwardResult {
            mu: eval.value(nodes.mu).clone(),
            logvar: eval.value(nodes.logvar).clone(),
            z: eval.value(nodes.z).clone(),
            x_hat: eval.value(nodes.x_hat).clone(),
            logit: logit.reshape(vec![n])?,
        })
    }

    /// Direct evaluation of one factor on its masked input.
    pub fn encode_factor(&self, i: usize, xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = |s: &str| self.param(&format!("enc.{i}.{s}")).expect("factor parameter");
        let h: Vec<f64> = dense(p("w_h"), p("b_h"), xi)
            .into_iter()
            .map(|v| leaky_relu(v, self.arch.leaky_slope))
            .collect();
        (dense(p("w_mu"), p("b_mu"), &h), dense(p("w_lv"), p("b_lv"), &h))
    }

    /// Posterior means and log-variances for every row of `x`, computed
    /// directly factor by factor.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        self.check_width(x)?;
        let (n, k) = (x.rows(), self.arch.k());
        let mut mu = Vec::with_capacity(n * k);
        let mut lv = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = x.row(r);
            for (i, f) in self.arch.factors.iter().enumerate() {
                let xi: Vec<f64> = f.indices.iter().map(|&j| row[j]).collect();
                let (m, l) = self.encode_factor(i, &xi);
                mu.extend(m);
                lv.extend(l);
            }
        }
        Ok((Tensor::matrix(n, k, mu)?, Tensor::matrix(n, k, lv)?))
    }

    /// Classifier logits from latent codes `z` `[B, K]`.
    pub fn classify(&self, z: &Tensor) -> Vec<f64> {
        let p = |s: &str| self.param(s).expect("classifier parameter");
        (0..z.rows())
            .map(|r| {
                let h: Vec<f64> = dense(p("cls.w1"), p("cls.b1"), z.row(r))
                    .into_iter()
                    .map(|v| leaky_relu(v, self.arch.leaky_slope))
                    .collect();
                dense(p("cls.w2"), p("cls.b2"), &h)[0]
            })
            .collect()
    }

    /// Deterministic-mode logits for every row of `x`.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let (mu, _) = self.encode(x)?;
        Ok(self.classify(&mu))
    }
}

/// `w[out,in] · v + b`.
fn dense(w: &Tensor, b: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| w.row(o).iter().zip(v).map(|(a, c)| a * c).sum::<f64>() + b.data()[o])
        .collect()
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Tensor {
    let sd = logvar.map(|l| (0.5 * l).exp());
    let noise = sd.zip_map(eps, |s, e| s * e);
    mu.zip_map(&noise, |m, n| m + n)
}

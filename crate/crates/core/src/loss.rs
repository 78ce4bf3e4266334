//! Pairwise hashing losses with a quantization penalty.
//!
//! Every required plugin reduces to a per-pair term phi(dot, s) over the
//! embedding dot product, so the framework evaluates loss and gradient from
//! one (value, d/d dot) interface. Sums run in fixed index order and are
//! normalized by the unordered pair count.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{quantization_error, QuantNorm};
use crate::nn::{join, Module, Param, Rng};
use crate::types::{LabelSet, SimilarityMatrix, TypeError};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("unknown loss plugin {0:?}")]
    UnknownPlugin(String),
    #[error("loss plugin {0} is declared but its formula ships separately; pick one of cel, dhn, dpsh, dch, hashnet")]
    OptionalPluginUnavailable(&'static str),
    #[error("pairwise losses need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("labels count {0} does not match embedding rows {1}")]
    LabelCountMismatch(usize, usize),
    #[error("embedding row {0} contains a non-finite entry")]
    NonFinite(usize),
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// The named plugins. The last two are optional interfaces without formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Cel,
    Dhn,
    Dpsh,
    Dch,
    HashNet,
    Wglhh,
    Hyp2,
}

impl LossKind {
    pub fn from_name(name: &str) -> Result<Self, LossError> {
        match name.to_ascii_lowercase().as_str() {
            "cel" => Ok(LossKind::Cel),
            "dhn" => Ok(LossKind::Dhn),
            "dpsh" => Ok(LossKind::Dpsh),
            "dch" => Ok(LossKind::Dch),
            "hashnet" => Ok(LossKind::HashNet),
            "wglhh" => Ok(LossKind::Wglhh),
            "hyp2" => Ok(LossKind::Hyp2),
            _ => Err(LossError::UnknownPlugin(name.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Cel => "cel",
            LossKind::Dhn => "dhn",
            LossKind::Dpsh => "dpsh",
            LossKind::Dch => "dch",
            LossKind::HashNet => "hashnet",
            LossKind::Wglhh => "wglhh",
            LossKind::Hyp2 => "hyp2",
        }
    }

    /// Plugins whose formulas ship with this crate.
    pub const REQUIRED: [LossKind; 5] = [
        LossKind::Cel,
        LossKind::Dhn,
        LossKind::Dpsh,
        LossKind::Dch,
        LossKind::HashNet,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub name: String,
    /// weight of the quantization penalty
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Cauchy scale for dch
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// per-pair class-imbalance weights; None takes the plugin default
    #[serde(default)]
    pub imbalance_weighting: Option<bool>,
    /// quantization norm; None takes the plugin default
    #[serde(default)]
    pub quant_norm: Option<QuantNorm>,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    20.0
}

impl LossConfig {
    pub fn named(name: &str) -> Result<Self, LossError> {
        LossKind::from_name(name)?;
        Ok(LossConfig {
            name: name.to_ascii_lowercase(),
            lambda: default_lambda(),
            gamma: default_gamma(),
            imbalance_weighting: None,
            quant_norm: None,
        })
    }

    pub fn kind(&self) -> Result<LossKind, LossError> {
        LossKind::from_name(&self.name)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        self.kind()?;
        if !(self.lambda >= 0.0) {
            return Err(LossError::BadConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(LossError::BadConfig(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Imbalance weighting defaults on for the losses defined around it.
    pub fn effective_imbalance(&self) -> Result<bool, LossError> {
        Ok(self.imbalance_weighting.unwrap_or(matches!(
            self.kind()?,
            LossKind::HashNet | LossKind::Dch
        )))
    }

    pub fn effective_quant_norm(&self) -> Result<QuantNorm, LossError> {
        if let Some(norm) = self.quant_norm {
            return Ok(norm);
        }
        Ok(match self.kind()? {
            LossKind::Dhn => QuantNorm::SmoothL1,
            LossKind::Dch => QuantNorm::L1,
            _ => QuantNorm::SquaredL2,
        })
    }
}

/// A batch of embeddings with materialized pairwise similarity.
pub struct PairwiseBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<LabelSet>,
    pub sim: SimilarityMatrix,
}

impl PairwiseBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<LabelSet>) -> Result<Self, LossError> {
        let b = embeddings.nrows();
        if b < 2 {
            return Err(LossError::BatchTooSmall(b));
        }
        if labels.len() != b {
            return Err(LossError::LabelCountMismatch(labels.len(), b));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LossError::NonFinite(i));
            }
        }
        let sim = SimilarityMatrix::from_labels(&labels)?;
        Ok(PairwiseBatch {
            embeddings,
            labels,
            sim,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn code_length(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn pair_count(&self) -> usize {
        self.len() * (self.len() - 1) / 2
    }
}

/// Relaxed Hamming distance (k - <u_i, u_j>) / 2 on continuous embeddings.
pub fn relaxed_hamming(u_i: ArrayView1<f64>, u_j: ArrayView1<f64>) -> Result<f64, LossError> {
    if u_i.len() != u_j.len() {
        return Err(LossError::LengthMismatch(u_i.len(), u_j.len()));
    }
    Ok((u_i.len() as f64 - u_i.dot(&u_j)) / 2.0)
}

/// Per-pair loss term over the embedding dot product.
pub trait PairLoss {
    /// Value and derivative with respect to the dot product.
    fn eval(&self, dot: f64, similar: bool, k: usize) -> (f64, f64);
    fn name(&self) -> &'static str;
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on sigmoid(dot / k).
pub struct Cel;

impl PairLoss for Cel {
    fn eval(&self, dot: f64, similar: bool, k: usize) -> (f64, f64) {
        let a = 1.0 / k as f64;
        let z = a * dot;
        let p = sigmoid(z);
        if similar {
            (softplus(-z), (p - 1.0) * a)
        } else {
            (softplus(z), p * a)
        }
    }

    fn name(&self) -> &'static str {
        "cel"
    }
}

/// Likelihood form log(1 + exp(theta)) - s * theta with theta = dot / 2.
/// DHN and DPSH share this pairwise term; they differ in quantization norm.
pub struct PairwiseLikelihood {
    label: &'static str,
}

impl PairwiseLikelihood {
    pub fn dhn() -> Self {
        PairwiseLikelihood { label: "dhn" }
    }

    pub fn dpsh() -> Self {
        PairwiseLikelihood { label: "dpsh" }
    }

    pub fn hashnet() -> Self {
        PairwiseLikelihood { label: "hashnet" }
    }
}

impl PairLoss for PairwiseLikelihood {
    fn eval(&self, dot: f64, similar: bool, _k: usize) -> (f64, f64) {
        let theta = 0.5 * dot;
        let s = if similar { 1.0 } else { 0.0 };
        let value = softplus(theta) - s * theta;
        let dvalue = 0.5 * (sigmoid(theta) - s);
        (value, dvalue)
    }

    fn name(&self) -> &'static str {
        self.label
    }
}

/// Cauchy cross-entropy over the relaxed Hamming distance, scale gamma.
pub struct Dch {
    pub gamma: f64,
}

const DCH_DISTANCE_FLOOR: f64 = 1e-6;

impl PairLoss for Dch {
    fn eval(&self, dot: f64, similar: bool, k: usize) -> (f64, f64) {
        let raw = (k as f64 - dot) / 2.0;
        let clamped = raw < DCH_DISTANCE_FLOOR;
        let d = raw.max(DCH_DISTANCE_FLOOR);
        let dd_ddot = if clamped { 0.0 } else { -0.5 };
        if similar {
            let value = (1.0 + d / self.gamma).ln();
            let dv_dd = 1.0 / (self.gamma + d);
            (value, dv_dd * dd_ddot)
        } else {
            let value = (1.0 + self.gamma / d).ln();
            let dv_dd = 1.0 / (self.gamma + d) - 1.0 / d;
            (value, dv_dd * dd_ddot)
        }
    }

    fn name(&self) -> &'static str {
        "dch"
    }
}

/// Builds the evaluator for a required plugin; optional plugins error out.
pub fn make_plugin(cfg: &LossConfig) -> Result<Box<dyn PairLoss>, LossError> {
    cfg.validate()?;
    match cfg.kind()? {
        LossKind::Cel => Ok(Box::new(Cel)),
        LossKind::Dhn => Ok(Box::new(PairwiseLikelihood::dhn())),
        LossKind::Dpsh => Ok(Box::new(PairwiseLikelihood::dpsh())),
        LossKind::Dch => Ok(Box::new(Dch { gamma: cfg.gamma })),
        LossKind::HashNet => Ok(Box::new(PairwiseLikelihood::hashnet())),
        LossKind::Wglhh => Err(LossError::OptionalPluginUnavailable("wglhh")),
        LossKind::Hyp2 => Err(LossError::OptionalPluginUnavailable("hyp2")),
    }
}

/// Per-pair weights correcting the similar/dissimilar imbalance in a batch:
/// total pairs over pairs of the same kind.
fn imbalance_weights(batch: &PairwiseBatch) -> (f64, f64) {
    let b = batch.len();
    let mut similar = 0usize;
    for i in 0..b {
        for j in (i + 1)..b {
            similar += batch.sim.get(i, j) as usize;
        }
    }
    let total = batch.pair_count();
    let dissimilar = total - similar;
    let w_sim = if similar > 0 {
        total as f64 / similar as f64
    } else {
        1.0
    };
    let w_dis = if dissimilar > 0 {
        total as f64 / dissimilar as f64
    } else {
        1.0
    };
    (w_sim, w_dis)
}

/// Mean per-pair loss under an explicit plugin.
pub fn pairwise_loss_with(
    plugin: &dyn PairLoss,
    batch: &PairwiseBatch,
    imbalance: bool,
) -> Result<f64, LossError> {
    let b = batch.len();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let k = batch.code_length();
    let (w_sim, w_dis) = if imbalance {
        imbalance_weights(batch)
    } else {
        (1.0, 1.0)
    };
    let mut acc = 0.0;
    for i in 0..b {
        let u_i = batch.embeddings.row(i);
        for j in (i + 1)..b {
            let similar = batch.sim.get(i, j) == 1;
            let dot = u_i.dot(&batch.embeddings.row(j));
            let (value, _) = plugin.eval(dot, similar, k);
            acc += if similar { w_sim } else { w_dis } * value;
        }
    }
    Ok(acc / batch.pair_count() as f64)
}

/// Pairwise and mean-quantization components, both independent of lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pairwise: f64,
    pub quantization: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambda: f64) -> f64 {
        self.pairwise + lambda * self.quantization
    }
}

pub fn loss_parts_with(
    plugin: &dyn PairLoss,
    batch: &PairwiseBatch,
    norm: QuantNorm,
    imbalance: bool,
) -> Result<LossBreakdown, LossError> {
    let pairwise = pairwise_loss_with(plugin, batch, imbalance)?;
    let mut q = 0.0;
    for row in batch.embeddings.rows() {
        q += quantization_error(row, norm);
    }
    Ok(LossBreakdown {
        pairwise,
        quantization: q / batch.len() as f64,
    })
}

/// Gradient of `pairwise + lambda * mean quantization` for all embeddings.
pub fn loss_gradient_with(
    plugin: &dyn PairLoss,
    batch: &PairwiseBatch,
    lambda: f64,
    norm: QuantNorm,
    imbalance: bool,
) -> Result<Array2<f64>, LossError> {
    let b = batch.len();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let k = batch.code_length();
    let (w_sim, w_dis) = if imbalance {
        imbalance_weights(batch)
    } else {
        (1.0, 1.0)
    };
    let inv_pairs = 1.0 / batch.pair_count() as f64;
    let mut grad = Array2::<f64>::zeros((b, k));
    for i in 0..b {
        for j in (i + 1)..b {
            let similar = batch.sim.get(i, j) == 1;
            let dot = batch.embeddings.row(i).dot(&batch.embeddings.row(j));
            let (_, dvalue) = plugin.eval(dot, similar, k);
            let w = if similar { w_sim } else { w_dis };
            let c = w * dvalue * inv_pairs;
            grad.row_mut(i).scaled_add(c, &batch.embeddings.row(j));
            grad.row_mut(j).scaled_add(c, &batch.embeddings.row(i));
        }
    }
    if lambda > 0.0 {
        let scale = lambda / b as f64;
        for (mut grow, urow) in grad.rows_mut().into_iter().zip(batch.embeddings.rows()) {
            for (g, &u) in grow.iter_mut().zip(urow.iter()) {
                let bsign = if u >= 0.0 { 1.0 } else { -1.0 };
                let t = u - bsign;
                let dq = match norm {
                    QuantNorm::L1 => {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    QuantNorm::SquaredL2 => 2.0 * t,
                    QuantNorm::SmoothL1 => t.clamp(-1.0, 1.0),
                };
                *g += scale * dq;
            }
        }
    }
    Ok(grad)
}

/// Eq.-style pairwise loss under the configured plugin.
pub fn pairwise_loss(batch: &PairwiseBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    let plugin = make_plugin(cfg)?;
    pairwise_loss_with(plugin.as_ref(), batch, cfg.effective_imbalance()?)
}

pub fn loss_parts(
    batch: &PairwiseBatch,
    cfg: &LossConfig,
    norm: QuantNorm,
) -> Result<LossBreakdown, LossError> {
    let plugin = make_plugin(cfg)?;
    loss_parts_with(plugin.as_ref(), batch, norm, cfg.effective_imbalance()?)
}

/// Pairwise term plus lambda times the mean quantization error.
pub fn total_loss(batch: &PairwiseBatch, cfg: &LossConfig, norm: QuantNorm) -> Result<f64, LossError> {
    Ok(loss_parts(batch, cfg, norm)?.total(cfg.lambda))
}

/// Analytic gradient of [`total_loss`] with respect to every embedding.
pub fn loss_gradient(
    batch: &PairwiseBatch,
    cfg: &LossConfig,
    norm: QuantNorm,
) -> Result<Array2<f64>, LossError> {
    let plugin = make_plugin(cfg)?;
    loss_gradient_with(
        plugin.as_ref(),
        batch,
        cfg.lambda,
        norm,
        cfg.effective_imbalance()?,
    )
}

/// One learnable anchor code per class; the parameter surface the hyp2
/// interface requires. The plugin's weighting formula ships separately.
pub struct ProxyTable {
    pub proxies: Param,
    num_classes: usize,
    code_length: usize,
}

impl ProxyTable {
    pub fn new(num_classes: usize, code_length: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (code_length as f64).sqrt();
        ProxyTable {
            proxies: Param::new(rng.normal_tensor(&[num_classes, code_length], std)),
            num_classes,
            code_length,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }
}

impl Module for ProxyTable {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(path, "proxies"), &mut self.proxies);
    }
}

/// Interface for proxy-based plugins (hyp2): a proxy table plus a pairwise
/// term. Implementations are deferred to the plugins' own sources.
pub trait ProxyPairLoss {
    /// Loss and embedding gradient given per-class proxies.
    fn eval(
        &self,
        batch: &PairwiseBatch,
        proxies: &ProxyTable,
    ) -> Result<(f64, Array2<f64>), LossError>;
    fn name(&self) -> &'static str;
}

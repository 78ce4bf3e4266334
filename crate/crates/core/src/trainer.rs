//! Mini-batch training loop and dataset encoding.
//!
//! Binds the backbone, the hash head, and a pairwise loss under one Adam
//! optimizer. Everything downstream of the seed is deterministic: the
//! shuffle order, the batch plan, and therefore the loss log.

use std::time::Instant;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, INPUT_CHANNELS};
use crate::head::{
    binarize_batch, continuation_beta, Activation, HashHead, HashHeadConfig, HeadError,
};
use crate::loss::{loss_gradient, loss_parts, LossConfig, LossError, LossKind, PairwiseBatch};
use crate::nn::{all_finite, join, zero_grads, Adam, Module, Param, Rng};
use crate::types::{HashCode, Sample};

/// Embedding magnitudes below this count as undecided at binarization time.
pub const NEAR_ZERO: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {id}: pixel shape {got:?} does not match configured {expected:?}")]
    SampleShape {
        id: u64,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (pairwise {pairwise}, quantization {quantization})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        pairwise: f64,
        quantization: f64,
    },
    #[error("model parameters became non-finite after epoch {epoch}")]
    ParamsNonFinite { epoch: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Optimization hyperparameters. Adam moment decays are fixed at 0.9/0.999
/// with epsilon 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Repetitions with consecutive seeds; reports average over runs.
    pub runs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 128,
            epochs: 20,
            runs: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(TrainError::BadConfig("runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-channel input normalization, recorded in the experiment config so
/// encoded databases stay comparable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Preprocess {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(TrainError::BadConfig(
                "preprocess std must be positive and all constants finite".into(),
            ));
        }
        Ok(())
    }
}

/// Backbone plus hash head, trained and checkpointed as one unit.
pub struct HashModel {
    pub backbone: Backbone,
    pub head: HashHead,
}

impl HashModel {
    /// Initializes both parts from a single seeded stream.
    pub fn build(
        backbone_cfg: BackboneConfig,
        head_cfg: HashHeadConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = Rng::seed_from_u64(seed);
        let backbone = Backbone::build_with_rng(backbone_cfg, &mut rng)?;
        let head = HashHead::new(backbone.feature_width(), head_cfg, &mut rng)?;
        Ok(HashModel { backbone, head })
    }

    pub fn code_length(&self) -> usize {
        self.head.code_length()
    }

    /// Images to continuous embeddings.
    pub fn embed_batch(
        &mut self,
        x: &Array4<f64>,
        training: bool,
    ) -> Result<Array2<f64>, TrainError> {
        let feats = self.backbone.forward(x, training)?;
        Ok(self.head.embed(&feats, training)?)
    }

    /// Accumulates gradients for a training-mode forward.
    pub fn backward(&mut self, dembeddings: &Array2<f64>) {
        let dfeats = self.head.backward(dembeddings);
        self.backbone.backward(&dfeats);
    }
}

impl Module for HashModel {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit(&join(path, "backbone"), f);
        self.head.visit(&join(path, "head"), f);
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub pairwise: f64,
    pub quantization: f64,
}

/// Loss history plus wall-clock timings. Timings are reported separately
/// so the log itself is identical across reruns of the same seed.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
}

fn plan_batches(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start >= 2 {
            out.push((start, end));
        }
        start = end;
    }
    out
}

fn stack_batch(
    samples: &[Sample],
    indices: &[usize],
    expected: (usize, usize, usize),
    pre: &Preprocess,
) -> Result<Array4<f64>, TrainError> {
    let (c, h, w) = expected;
    let mut x = Array4::zeros((indices.len(), c, h, w));
    for (row, &i) in indices.iter().enumerate() {
        let s = &samples[i];
        let got = s.pixels.dim();
        if got != expected {
            return Err(TrainError::SampleShape {
                id: s.id,
                expected,
                got,
            });
        }
        for ch in 0..c {
            let mean = pre.mean[ch];
            let std = pre.std[ch];
            let src = s.pixels.index_axis(ndarray::Axis(0), ch);
            let mut dst = x.index_axis_mut(ndarray::Axis(0), row);
            let mut dst = dst.index_axis_mut(ndarray::Axis(0), ch);
            dst.zip_mut_with(&src, |d, &p| *d = (p - mean) / std);
        }
    }
    Ok(x)
}

/// Runs the seeded optimization loop over `samples`, invoking `on_epoch`
/// after each epoch with the freshly appended record.
pub fn train(
    model: &mut HashModel,
    samples: &[Sample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    pre: &Preprocess,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    pre.validate()?;
    loss_cfg.validate()?;
    let kind = loss_cfg.kind()?;
    let norm = loss_cfg.effective_quant_norm()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if samples.len() < 2 {
        return Err(TrainError::BadConfig(
            "training needs at least two samples to form a pair".into(),
        ));
    }
    let (h, w) = model.backbone.config().input_size;
    let expected = (INPUT_CHANNELS, h, w);
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut wall_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if kind == LossKind::HashNet {
            model
                .head
                .set_activation(Activation::ScaledTanh(continuation_beta(epoch, cfg.epochs)))?;
        }
        rng.shuffle(&mut indices);
        let plan = plan_batches(indices.len(), cfg.batch_size);
        let mut sum_pairwise = 0.0;
        let mut sum_quant = 0.0;
        let mut sum_total = 0.0;
        for (batch_no, &(start, end)) in plan.iter().enumerate() {
            let batch_indices = &indices[start..end];
            let x = stack_batch(samples, batch_indices, expected, pre)?;
            let labels = batch_indices
                .iter()
                .map(|&i| samples[i].labels.clone())
                .collect();
            let embeddings = model.embed_batch(&x, true)?;
            if embeddings.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    pairwise: f64::NAN,
                    quantization: f64::NAN,
                });
            }
            let batch = PairwiseBatch::new(embeddings, labels)?;
            let parts = loss_parts(&batch, loss_cfg, norm)?;
            let total = parts.total(loss_cfg.lambda);
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    pairwise: parts.pairwise,
                    quantization: parts.quantization,
                });
            }
            let grad = loss_gradient(&batch, loss_cfg, norm)?;
            zero_grads(model);
            model.backward(&grad);
            optimizer.step(model);
            sum_pairwise += parts.pairwise;
            sum_quant += parts.quantization;
            sum_total += total;
        }
        if !all_finite(model) {
            return Err(TrainError::ParamsNonFinite { epoch });
        }
        let batches = plan.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            total: sum_total / batches,
            pairwise: sum_pairwise / batches,
            quantization: sum_quant / batches,
        };
        on_epoch(&record);
        records.push(record);
        wall_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        records,
        wall_seconds,
    })
}

/// Evaluation-mode embeddings and codes for every sample, in input order.
pub struct EncodeOutcome {
    pub embeddings: Array2<f64>,
    pub codes: Vec<HashCode>,
    /// Entries with |u| below [`NEAR_ZERO`]; these binarize to +1 but the
    /// sign is numerically undecided.
    pub near_zero: usize,
}

pub fn encode_dataset(
    model: &mut HashModel,
    samples: &[Sample],
    batch_size: usize,
    pre: &Preprocess,
) -> Result<EncodeOutcome, TrainError> {
    pre.validate()?;
    if batch_size == 0 {
        return Err(TrainError::BadConfig("encode batch_size must be positive".into()));
    }
    let (h, w) = model.backbone.config().input_size;
    let expected = (INPUT_CHANNELS, h, w);
    let k = model.code_length();
    let mut embeddings = Array2::zeros((samples.len(), k));
    let mut row = 0;
    for chunk in samples.chunks(batch_size) {
        let indices: Vec<usize> = (0..chunk.len()).collect();
        let x = stack_batch(chunk, &indices, expected, pre)?;
        let emb = model.embed_batch(&x, false)?;
        embeddings
            .slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&emb);
        row += chunk.len();
    }
    let near_zero = embeddings.iter().filter(|v| v.abs() < NEAR_ZERO).count();
    let codes = binarize_batch(&embeddings)?;
    Ok(EncodeOutcome {
        embeddings,
        codes,
        near_zero,
    })
}

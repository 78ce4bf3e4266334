//! Hash layer: pooled features to k-dim embeddings to {-1,+1} codes.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, Linear, Module, Param, Rng};
use crate::types::{HashCode, TypeError, MAX_CODE_LENGTH};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("feature width {got} does not match head input width {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("embedding entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid head config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Activation applied after the affine hash layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    /// tanh(beta * x); sharpened during HashNet-style continuation.
    ScaledTanh(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashHeadConfig {
    pub code_length: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl HashHeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.code_length == 0 || self.code_length > MAX_CODE_LENGTH {
            return Err(HeadError::BadConfig(format!(
                "code length {} outside [1, {MAX_CODE_LENGTH}]",
                self.code_length
            )));
        }
        if let Activation::ScaledTanh(beta) = self.activation {
            if !(beta > 0.0) {
                return Err(HeadError::BadConfig(format!(
                    "scaled_tanh beta must be positive, got {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Continuation schedule for scaled tanh: beta in {1, 2, 4, 8}, advanced
/// every quarter of the training run.
pub fn continuation_beta(epoch: usize, total_epochs: usize) -> f64 {
    assert!(total_epochs > 0);
    let quarter = ((4 * epoch) / total_epochs).min(3);
    f64::powi(2.0, quarter as i32)
}

/// One affine layer plus activation; the trainable hash function tail.
pub struct HashHead {
    cfg: HashHeadConfig,
    fc: Linear,
    act_cache: Option<Array2<f64>>,
}

impl HashHead {
    pub fn new(feature_width: usize, cfg: HashHeadConfig, rng: &mut Rng) -> Result<Self, HeadError> {
        cfg.validate()?;
        Ok(HashHead {
            cfg,
            fc: Linear::new(feature_width, cfg.code_length, rng),
            act_cache: None,
        })
    }

    pub fn config(&self) -> HashHeadConfig {
        self.cfg
    }

    pub fn code_length(&self) -> usize {
        self.cfg.code_length
    }

    pub fn feature_width(&self) -> usize {
        self.fc.in_dim()
    }

    /// Swaps the activation (continuation schedules mutate beta per epoch).
    pub fn set_activation(&mut self, act: Activation) -> Result<(), HeadError> {
        let cfg = HashHeadConfig {
            activation: act,
            ..self.cfg
        };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Affine map plus activation; rows are per-sample embeddings.
    pub fn embed(&mut self, features: &Array2<f64>, training: bool) -> Result<Array2<f64>, HeadError> {
        if features.ncols() != self.fc.in_dim() {
            return Err(HeadError::DimensionMismatch {
                got: features.ncols(),
                expected: self.fc.in_dim(),
            });
        }
        let z = self.fc.forward(features, training);
        let y = match self.cfg.activation {
            Activation::Identity => z,
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::ScaledTanh(beta) => z.mapv(|v| (beta * v).tanh()),
        };
        self.act_cache = (training && self.cfg.activation != Activation::Identity)
            .then(|| y.clone());
        Ok(y)
    }

    /// Backpropagates an embedding gradient to a feature gradient.
    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let dz = match self.cfg.activation {
            Activation::Identity => dy.clone(),
            Activation::Tanh => {
                let y = self.act_cache.as_ref().expect("head backward without forward");
                dy * &y.mapv(|t| 1.0 - t * t)
            }
            Activation::ScaledTanh(beta) => {
                let y = self.act_cache.as_ref().expect("head backward without forward");
                dy * &y.mapv(|t| beta * (1.0 - t * t))
            }
        };
        self.fc.backward(&dz)
    }
}

impl Module for HashHead {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc.visit(&join(path, "fc"), f);
    }
}

/// sign with sign(0) = +1, packing into a bit-packed code.
pub fn binarize(u: ArrayView1<f64>) -> Result<HashCode, HeadError> {
    if let Some((index, _)) = u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(HeadError::NonFinite { index });
    }
    let bits: Vec<f64> = u.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
    Ok(HashCode::pack(&bits)?)
}

/// Binarizes every row of an embedding matrix.
pub fn binarize_batch(u: &Array2<f64>) -> Result<Vec<HashCode>, HeadError> {
    u.rows().into_iter().map(binarize).collect()
}

/// Norm used to measure the embedding-to-code gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantNorm {
    L1,
    /// squared Euclidean distance
    SquaredL2,
    /// Huber form: quadratic within unit residual, linear outside
    SmoothL1,
}

/// Distance between an embedding and its binarization in the chosen norm.
pub fn quantization_error(u: ArrayView1<f64>, norm: QuantNorm) -> f64 {
    u.iter()
        .map(|&v| {
            let b = if v >= 0.0 { 1.0 } else { -1.0 };
            let t = v - b;
            match norm {
                QuantNorm::L1 => t.abs(),
                QuantNorm::SquaredL2 => t * t,
                QuantNorm::SmoothL1 => {
                    if t.abs() < 1.0 {
                        0.5 * t * t
                    } else {
                        t.abs() - 0.5
                    }
                }
            }
        })
        .sum()
}

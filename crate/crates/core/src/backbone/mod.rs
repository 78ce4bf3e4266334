//! Multi-resolution convolutional backbone.
//!
//! The network keeps several image resolutions alive in parallel. A stride-2
//! stem quarters the input, a bottleneck stage widens it to 256 channels,
//! and each later stage adds one branch at half the resolution and twice the
//! base width of the previous one. Modules within a stage run residual
//! blocks per branch and then exchange information across all branches.
//! An augmented head widens every branch to `128 * 2^r` channels, merges
//! top-down with stride-2 convolutions, and global-average-pools into a
//! feature vector of `head_width` channels.

mod blocks;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, Module, Param, Rng};
use blocks::{Bottleneck, ConvBnRelu, HeadBlock, HrModule, Transition};

/// Channels produced by both stem convolutions.
pub const STEM_WIDTH: usize = 64;
/// Bottleneck mid width of the first stage.
pub const STAGE1_MID: usize = 64;
/// Output channels of the first stage.
pub const STAGE1_OUT: usize = 256;
/// Expected image channels.
pub const INPUT_CHANNELS: usize = 3;
/// Input sides must be divisible by this.
pub const INPUT_MULTIPLE: usize = 32;
/// Largest supported stage count.
pub const MAX_STAGES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    BadConfig(String),
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("batch is empty")]
    EmptyBatch,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Number of resolution stages, 1 to 4.
    #[serde(default = "default_num_stages")]
    pub num_stages: usize,
    /// Channel width of the highest-resolution branch.
    pub base_width: usize,
    /// Residual blocks per branch inside every module.
    #[serde(default = "default_blocks_per_branch")]
    pub blocks_per_branch: usize,
    /// Module count per stage; the first stage always has one.
    #[serde(default = "default_modules_per_stage")]
    pub modules_per_stage: Vec<usize>,
    /// Channels of the pooled feature vector.
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    /// Expected (height, width) of inputs; both divisible by 32.
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
}

fn default_num_stages() -> usize {
    4
}

fn default_blocks_per_branch() -> usize {
    4
}

fn default_modules_per_stage() -> Vec<usize> {
    vec![1, 1, 4, 3]
}

fn default_head_width() -> usize {
    2048
}

fn default_input_size() -> (usize, usize) {
    (224, 224)
}

impl BackboneConfig {
    /// Full-size configuration at the given base width.
    pub fn classification_preset(base_width: usize) -> Self {
        BackboneConfig {
            num_stages: default_num_stages(),
            base_width,
            blocks_per_branch: default_blocks_per_branch(),
            modules_per_stage: default_modules_per_stage(),
            head_width: default_head_width(),
            input_size: default_input_size(),
        }
    }

    /// Two-stage configuration small enough to train on a laptop CPU.
    pub fn desk_preset() -> Self {
        BackboneConfig {
            num_stages: 2,
            base_width: 8,
            blocks_per_branch: 4,
            modules_per_stage: vec![1, 1],
            head_width: 256,
            input_size: (32, 32),
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |msg: String| Err(BackboneError::BadConfig(msg));
        if self.num_stages == 0 || self.num_stages > MAX_STAGES {
            return bad(format!(
                "num_stages must be 1..={MAX_STAGES}, got {}",
                self.num_stages
            ));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.blocks_per_branch == 0 {
            return bad("blocks_per_branch must be positive".into());
        }
        if self.modules_per_stage.len() != self.num_stages {
            return bad(format!(
                "modules_per_stage must list {} stages, got {}",
                self.num_stages,
                self.modules_per_stage.len()
            ));
        }
        if self.modules_per_stage[0] != 1 {
            return bad("the first stage always has exactly one module".into());
        }
        if self.modules_per_stage.iter().any(|&m| m == 0) {
            return bad("every stage needs at least one module".into());
        }
        if self.head_width == 0 {
            return bad("head_width must be positive".into());
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return bad(format!(
                "input_size sides must be positive multiples of {INPUT_MULTIPLE}, got {h}x{w}"
            ));
        }
        Ok(())
    }

    /// Branch widths for a 1-indexed stage.
    pub fn stage_widths(&self, stage: usize) -> Vec<usize> {
        if stage <= 1 {
            vec![STAGE1_OUT]
        } else {
            (0..stage).map(|r| self.base_width << r).collect()
        }
    }

    /// Spatial size of every branch per stage, highest resolution first.
    pub fn resolution_ladder(&self) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = self.input_size;
        (1..=self.num_stages)
            .map(|stage| {
                let branches = if stage == 1 { 1 } else { stage };
                (0..branches)
                    .map(|r| (h >> (r + 2), w >> (r + 2)))
                    .collect()
            })
            .collect()
    }
}

/// The assembled network with its layer state and gradient buffers.
pub struct Backbone {
    cfg: BackboneConfig,
    stem1: ConvBnRelu,
    stem2: ConvBnRelu,
    stage1: Vec<Bottleneck>,
    transitions: Vec<Transition>,
    stages: Vec<Vec<HrModule>>,
    head: HeadBlock,
    /// Branch shapes recorded per stage by the most recent forward pass.
    pub last_resolutions: Vec<Vec<(usize, usize)>>,
}

impl Backbone {
    /// Builds the network and initializes all weights from the seed.
    pub fn build(cfg: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        let mut rng = Rng::seed_from_u64(seed);
        Self::build_with_rng(cfg, &mut rng)
    }

    /// Builds the network, drawing all weights from the caller's stream.
    pub fn build_with_rng(cfg: BackboneConfig, rng: &mut Rng) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let stem1 = ConvBnRelu::new(INPUT_CHANNELS, STEM_WIDTH, 3, 2, 1, false, rng);
        let stem2 = ConvBnRelu::new(STEM_WIDTH, STEM_WIDTH, 3, 2, 1, false, rng);
        let stage1 = (0..cfg.blocks_per_branch)
            .map(|i| {
                let in_ch = if i == 0 { STEM_WIDTH } else { STAGE1_OUT };
                Bottleneck::new(in_ch, STAGE1_MID, STAGE1_OUT, rng)
            })
            .collect();
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for stage in 2..=cfg.num_stages {
            let prev = cfg.stage_widths(stage - 1);
            let next = cfg.stage_widths(stage);
            transitions.push(Transition::new(&prev, &next, rng));
            let modules = (0..cfg.modules_per_stage[stage - 1])
                .map(|_| HrModule::new(&next, cfg.blocks_per_branch, rng))
                .collect();
            stages.push(modules);
        }
        let head = HeadBlock::new(&cfg.stage_widths(cfg.num_stages), cfg.head_width, rng);
        Ok(Backbone {
            cfg,
            stem1,
            stem2,
            stage1,
            transitions,
            stages,
            head,
            last_resolutions: Vec::new(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_width(&self) -> usize {
        self.cfg.head_width
    }

    pub fn count_parameters(&mut self) -> usize {
        crate::nn::count_parameters(self)
    }

    /// Runs images through the network, producing one feature row each.
    pub fn forward(
        &mut self,
        x: &Array4<f64>,
        training: bool,
    ) -> Result<Array2<f64>, BackboneError> {
        let (n, c, h, w) = x.dim();
        if n == 0 {
            return Err(BackboneError::EmptyBatch);
        }
        let expected = (INPUT_CHANNELS, self.cfg.input_size.0, self.cfg.input_size.1);
        if (c, h, w) != expected {
            return Err(BackboneError::ShapeMismatch {
                expected,
                got: (c, h, w),
            });
        }
        self.last_resolutions.clear();
        let z = self.stem1.forward(x, training);
        let mut z = self.stem2.forward(&z, training);
        for block in &mut self.stage1 {
            z = block.forward(&z, training);
        }
        let mut branches = vec![z];
        self.last_resolutions.push(shapes_of(&branches));
        for (transition, stage) in self.transitions.iter_mut().zip(&mut self.stages) {
            branches = transition.forward(&branches, training);
            for module in stage {
                branches = module.forward(&branches, training);
            }
            self.last_resolutions.push(shapes_of(&branches));
        }
        Ok(self.head.forward(&branches, training))
    }

    /// Propagates feature gradients back through every layer, accumulating
    /// into the parameter gradient buffers. Call after a training forward.
    pub fn backward(&mut self, dfeat: &Array2<f64>) {
        let mut dbranches = self.head.backward(dfeat);
        for (transition, stage) in self.transitions.iter_mut().zip(&mut self.stages).rev() {
            for module in stage.iter_mut().rev() {
                dbranches = module.backward(&dbranches);
            }
            dbranches = transition.backward(&dbranches);
        }
        let mut dz = dbranches.pop().expect("stage one gradient");
        for block in self.stage1.iter_mut().rev() {
            dz = block.backward(&dz);
        }
        let dz = self.stem2.backward(&dz);
        self.stem1.backward(&dz);
    }

}

fn shapes_of(branches: &[Array4<f64>]) -> Vec<(usize, usize)> {
    branches
        .iter()
        .map(|b| {
            let (_, _, h, w) = b.dim();
            (h, w)
        })
        .collect()
}

impl Module for Backbone {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem1.visit(&join(path, "stem1"), f);
        self.stem2.visit(&join(path, "stem2"), f);
        for (i, block) in self.stage1.iter_mut().enumerate() {
            block.visit(&join(path, &format!("stage1/block{i}")), f);
        }
        for (s, (transition, stage)) in
            self.transitions.iter_mut().zip(&mut self.stages).enumerate()
        {
            let stage_no = s + 2;
            transition.visit(&join(path, &format!("transition{stage_no}")), f);
            for (m, module) in stage.iter_mut().enumerate() {
                module.visit(&join(path, &format!("stage{stage_no}/module{m}")), f);
            }
        }
        self.head.visit(&join(path, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fdcheck::{central_diff, rel_err};
    use ndarray::Ix4;

    fn input_tensor(rng: &mut Rng, n: usize, hw: usize) -> Array4<f64> {
        rng.normal_tensor(&[n, INPUT_CHANNELS, hw, hw], 1.0)
            .into_dimensionality::<Ix4>()
            .unwrap()
    }

    fn micro_config() -> BackboneConfig {
        BackboneConfig {
            num_stages: 2,
            base_width: 2,
            blocks_per_branch: 1,
            modules_per_stage: vec![1, 1],
            head_width: 8,
            input_size: (32, 32),
        }
    }

    #[test]
    fn desk_preset_parameter_count_is_frozen() {
        let mut model = Backbone::build(BackboneConfig::desk_preset(), 0).unwrap();
        assert_eq!(model.count_parameters(), 842_016);
    }

    #[test]
    fn desk_preset_stays_under_a_million_parameters() {
        let mut model = Backbone::build(BackboneConfig::desk_preset(), 0).unwrap();
        assert!(model.count_parameters() < 1_000_000);
    }

    #[test]
    fn width_presets_hit_reference_parameter_counts() {
        // analytic counts, checked by hand against the layer inventory
        let expected: [(usize, usize, f64); 4] = [
            (18, 19_250_004, 21.3e6),
            (32, 39_183_680, 41.2e6),
            (48, 75_420_864, 77.5e6),
            (64, 126_010_944, 128.1e6),
        ];
        let mut previous = 0usize;
        for (width, analytic, reference) in expected {
            let mut model =
                Backbone::build(BackboneConfig::classification_preset(width), 0).unwrap();
            let count = model.count_parameters();
            drop(model);
            assert_eq!(count, analytic, "width {width}");
            let deviation = (count as f64 - reference).abs() / reference;
            assert!(
                deviation <= 0.10,
                "width {width}: {count} deviates {:.1}% from {reference}",
                deviation * 100.0
            );
            assert!(count > previous, "parameter count must grow with width");
            previous = count;
        }
    }

    #[test]
    fn forward_produces_one_feature_row_per_image() {
        let cfg = BackboneConfig::desk_preset();
        let mut model = Backbone::build(cfg, 7).unwrap();
        let mut rng = Rng::seed_from_u64(11);
        let x = input_tensor(&mut rng, 3, 32);
        let feats = model.forward(&x, false).unwrap();
        assert_eq!(feats.dim(), (3, 256));
        assert!(feats.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_shapes_and_empty_batches() {
        let mut model = Backbone::build(BackboneConfig::desk_preset(), 0).unwrap();
        let bad = Array4::<f64>::zeros((2, 3, 64, 64));
        assert!(matches!(
            model.forward(&bad, false),
            Err(BackboneError::ShapeMismatch { .. })
        ));
        let empty = Array4::<f64>::zeros((0, 3, 32, 32));
        assert_eq!(model.forward(&empty, false), Err(BackboneError::EmptyBatch));
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut c = BackboneConfig::desk_preset();
        c.input_size = (48, 32);
        assert!(matches!(c.validate(), Err(BackboneError::BadConfig(_))));
        let mut c = BackboneConfig::desk_preset();
        c.modules_per_stage = vec![1];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_preset();
        c.modules_per_stage = vec![2, 1];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_preset();
        c.num_stages = 5;
        c.modules_per_stage = vec![1, 1, 1, 1, 1];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_preset();
        c.num_stages = 0;
        c.modules_per_stage = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_stage_halves_the_new_branch_resolution() {
        let cfg = BackboneConfig {
            num_stages: 3,
            base_width: 4,
            blocks_per_branch: 1,
            modules_per_stage: vec![1, 1, 1],
            head_width: 16,
            input_size: (64, 32),
        };
        let ladder = cfg.resolution_ladder();
        assert_eq!(ladder[0], vec![(16, 8)]);
        assert_eq!(ladder[1], vec![(16, 8), (8, 4)]);
        assert_eq!(ladder[2], vec![(16, 8), (8, 4), (4, 2)]);
        let mut model = Backbone::build(cfg, 3).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let x = rng
            .normal_tensor(&[2, INPUT_CHANNELS, 64, 32], 1.0)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let feats = model.forward(&x, false).unwrap();
        assert_eq!(feats.dim(), (2, 16));
        assert_eq!(model.last_resolutions, ladder);
    }

    #[test]
    fn duplicate_images_in_a_batch_get_identical_features() {
        let mut model = Backbone::build(micro_config(), 21).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let one = input_tensor(&mut rng, 1, 32);
        let mut x = Array4::zeros((2, INPUT_CHANNELS, 32, 32));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(&one.index_axis(ndarray::Axis(0), 0));
        x.index_axis_mut(ndarray::Axis(0), 1).assign(&one.index_axis(ndarray::Axis(0), 0));
        let feats = model.forward(&x, false).unwrap();
        let a = feats.row(0).to_owned();
        let b = feats.row(1).to_owned();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let mut a = Backbone::build(micro_config(), 42).unwrap();
        let mut b = Backbone::build(micro_config(), 42).unwrap();
        let mut c = Backbone::build(micro_config(), 43).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let x = input_tensor(&mut rng, 2, 32);
        let fa = a.forward(&x, false).unwrap();
        let fb = b.forward(&x, false).unwrap();
        let fc = c.forward(&x, false).unwrap();
        assert_eq!(fa, fb);
        assert_ne!(fa, fc);
    }

    #[test]
    fn eval_mode_forward_is_repeatable() {
        let mut model = Backbone::build(micro_config(), 17).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let x = input_tensor(&mut rng, 2, 32);
        let first = model.forward(&x, false).unwrap();
        let second = model.forward(&x, false).unwrap();
        assert_eq!(first, second);
    }

    /// Fixture captured from this implementation; guards against silent
    /// numeric drift in any layer.
    #[test]
    fn micro_forward_matches_frozen_fixture() {
        let mut model = Backbone::build(micro_config(), 123).unwrap();
        let mut rng = Rng::seed_from_u64(321);
        let x = input_tensor(&mut rng, 2, 32);
        let feats = model.forward(&x, false).unwrap();
        let sum: f64 = feats.iter().sum();
        let abs_sum: f64 = feats.iter().map(|v| v.abs()).sum();
        let expected_sum = 17.146409819650952;
        let expected_abs = 17.146409819650952;
        let expected_first = 0.48421292656587245;
        assert!(
            (sum - expected_sum).abs() <= 1e-9 * expected_sum.abs().max(1.0),
            "sum {sum}"
        );
        assert!(
            (abs_sum - expected_abs).abs() <= 1e-9 * expected_abs.max(1.0),
            "abs sum {abs_sum}"
        );
        assert!(
            (feats[[0, 0]] - expected_first).abs() <= 1e-9,
            "first {}",
            feats[[0, 0]]
        );
    }

    fn nudge(model: &mut Backbone, path: &str, idx: usize, delta: f64) {
        let mut hit = false;
        model.visit("", &mut |p, param| {
            if p == path {
                let slice = param.value.as_slice_mut().unwrap();
                slice[idx] += delta;
                hit = true;
            }
        });
        assert!(hit, "no parameter at {path}");
    }

    fn grad_at(model: &mut Backbone, path: &str, idx: usize) -> f64 {
        let mut out = None;
        model.visit("", &mut |p, param| {
            if p == path {
                out = Some(param.grad.as_ref().expect("gradient allocated").as_slice().unwrap()[idx]);
            }
        });
        out.expect("parameter path")
    }

    #[test]
    fn backward_matches_finite_differences_at_probe_parameters() {
        let mut model = Backbone::build(micro_config(), 77).unwrap();
        let mut rng = Rng::seed_from_u64(78);
        let x = input_tensor(&mut rng, 2, 32);
        let coef = rng
            .normal_tensor(&[2, 8], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        crate::nn::zero_grads(&mut model);
        let feats = model.forward(&x, true).unwrap();
        model.backward(&coef);
        let probes: &[(&str, usize)] = &[
            ("stem1/conv/weight", 0),
            ("stem2/bn/gamma", 3),
            ("stage1/block0/cb2/conv/weight", 10),
            ("stage1/block0/shortcut/conv/weight", 4),
            ("transition2/new/conv/weight", 5),
            ("stage2/module0/branch1/block0/cb1/conv/weight", 2),
            ("stage2/module0/fuse0from1/up/conv/weight", 1),
            ("stage2/module0/fuse1from0/down0/conv/weight", 2),
            ("head/incre1/shortcut/conv/weight", 0),
            ("head/downsamp0/conv/bias", 0),
            ("head/final/conv/weight", 7),
            ("head/final/bn/beta", 2),
        ];
        drop(feats);
        // h small enough that no relu unit crosses zero inside the interval
        for &(path, idx) in probes {
            let analytic = grad_at(&mut model, path, idx);
            let numeric = central_diff(
                &mut |delta| {
                    nudge(&mut model, path, idx, delta);
                    let out = model.forward(&x, true).unwrap();
                    nudge(&mut model, path, idx, -delta);
                    (&out * &coef).sum()
                },
                1e-6,
            );
            let err = rel_err(analytic, numeric);
            assert!(
                err < 1e-5,
                "{path}[{idx}]: analytic {analytic}, numeric {numeric}, rel {err}"
            );
        }
    }

    #[test]
    fn visit_covers_distinct_paths_and_finite_values() {
        let mut model = Backbone::build(micro_config(), 10).unwrap();
        let mut paths = std::collections::BTreeSet::new();
        let mut total = 0usize;
        model.visit("", &mut |p, param| {
            assert!(paths.insert(p.to_string()), "duplicate path {p}");
            assert!(param.value.iter().all(|v| v.is_finite()));
            if param.trainable {
                total += param.value.len();
            }
        });
        assert_eq!(total, model.count_parameters());
        assert!(paths.iter().any(|p| p.starts_with("head/final")));
        assert!(paths.iter().any(|p| p.starts_with("stage2/module0/fuse")));
    }
}

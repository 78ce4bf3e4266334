//! Building blocks for the multi-resolution backbone.

use ndarray::Array4;

use crate::nn::{join, BatchNorm2d, Conv2d, GlobalAvgPool, Module, Param, Relu, Rng, UpsampleNearest};

/// conv + batch norm, no activation (used before residual sums).
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, padding, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let z = self.conv.forward(x, training);
        self.bn.forward(&z, training)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dz = self.bn.backward(dy);
        self.conv.backward(&dz)
    }
}

impl Module for ConvBn {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&join(path, "conv"), f);
        self.bn.visit(&join(path, "bn"), f);
    }
}

/// conv + batch norm + relu; `with_bias` covers the head convolutions.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, padding, with_bias, rng),
            bn: BatchNorm2d::new(out_ch),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let z = self.conv.forward(x, training);
        let z = self.bn.forward(&z, training);
        self.relu.forward(&z, training)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dz = self.relu.backward(dy);
        let dz = self.bn.backward(&dz);
        self.conv.backward(&dz)
    }
}

impl Module for ConvBnRelu {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&join(path, "conv"), f);
        self.bn.visit(&join(path, "bn"), f);
    }
}

/// Two 3x3 convolutions with an identity shortcut; width-preserving.
pub struct BasicBlock {
    cb1: ConvBn,
    relu1: Relu,
    cb2: ConvBn,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        BasicBlock {
            cb1: ConvBn::new(width, width, 3, 1, 1, rng),
            relu1: Relu::new(),
            cb2: ConvBn::new(width, width, 3, 1, 1, rng),
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let z = self.cb1.forward(x, training);
        let z = self.relu1.forward(&z, training);
        let z = self.cb2.forward(&z, training);
        self.relu_out.forward(&(z + x), training)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dsum = self.relu_out.backward(dy);
        let dz = self.cb2.backward(&dsum);
        let dz = self.relu1.backward(&dz);
        self.cb1.backward(&dz) + dsum
    }
}

impl Module for BasicBlock {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cb1.visit(&join(path, "cb1"), f);
        self.cb2.visit(&join(path, "cb2"), f);
    }
}

/// 1x1 reduce, 3x3, 1x1 expand, with a projection shortcut on width change.
pub struct Bottleneck {
    cb1: ConvBn,
    relu1: Relu,
    cb2: ConvBn,
    relu2: Relu,
    cb3: ConvBn,
    shortcut: Option<ConvBn>,
    relu_out: Relu,
}

impl Bottleneck {
    pub fn new(in_ch: usize, mid_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        Bottleneck {
            cb1: ConvBn::new(in_ch, mid_ch, 1, 1, 0, rng),
            relu1: Relu::new(),
            cb2: ConvBn::new(mid_ch, mid_ch, 3, 1, 1, rng),
            relu2: Relu::new(),
            cb3: ConvBn::new(mid_ch, out_ch, 1, 1, 0, rng),
            shortcut: (in_ch != out_ch).then(|| ConvBn::new(in_ch, out_ch, 1, 1, 0, rng)),
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let z = self.cb1.forward(x, training);
        let z = self.relu1.forward(&z, training);
        let z = self.cb2.forward(&z, training);
        let z = self.relu2.forward(&z, training);
        let z = self.cb3.forward(&z, training);
        let sum = match &mut self.shortcut {
            Some(sc) => z + sc.forward(x, training),
            None => z + x,
        };
        self.relu_out.forward(&sum, training)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dsum = self.relu_out.backward(dy);
        let dz = self.cb3.backward(&dsum);
        let dz = self.relu2.backward(&dz);
        let dz = self.cb2.backward(&dz);
        let dz = self.relu1.backward(&dz);
        let dx_main = self.cb1.backward(&dz);
        match &mut self.shortcut {
            Some(sc) => dx_main + sc.backward(&dsum),
            None => dx_main + &dsum,
        }
    }
}

impl Module for Bottleneck {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cb1.visit(&join(path, "cb1"), f);
        self.cb2.visit(&join(path, "cb2"), f);
        self.cb3.visit(&join(path, "cb3"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit(&join(path, "shortcut"), f);
        }
    }
}

/// Adapts the previous stage's branches to the next stage's widths and
/// spawns one extra half-resolution branch from the last existing one.
pub struct Transition {
    existing: Vec<Option<ConvBnRelu>>,
    new_branch: ConvBnRelu,
}

impl Transition {
    pub fn new(prev_widths: &[usize], next_widths: &[usize], rng: &mut Rng) -> Self {
        assert_eq!(next_widths.len(), prev_widths.len() + 1);
        let existing = prev_widths
            .iter()
            .zip(next_widths)
            .map(|(&p, &n)| (p != n).then(|| ConvBnRelu::new(p, n, 3, 1, 1, false, rng)))
            .collect();
        let new_branch = ConvBnRelu::new(
            *prev_widths.last().unwrap(),
            *next_widths.last().unwrap(),
            3,
            2,
            1,
            false,
            rng,
        );
        Transition {
            existing,
            new_branch,
        }
    }

    pub fn forward(&mut self, xs: &[Array4<f64>], training: bool) -> Vec<Array4<f64>> {
        assert_eq!(xs.len(), self.existing.len());
        let mut out: Vec<Array4<f64>> = self
            .existing
            .iter_mut()
            .zip(xs)
            .map(|(conv, x)| match conv {
                Some(c) => c.forward(x, training),
                None => x.clone(),
            })
            .collect();
        out.push(self.new_branch.forward(xs.last().unwrap(), training));
        out
    }

    pub fn backward(&mut self, dys: &[Array4<f64>]) -> Vec<Array4<f64>> {
        assert_eq!(dys.len(), self.existing.len() + 1);
        let mut dxs: Vec<Array4<f64>> = self
            .existing
            .iter_mut()
            .zip(dys)
            .map(|(conv, dy)| match conv {
                Some(c) => c.backward(dy),
                None => dy.clone(),
            })
            .collect();
        let from_new = self.new_branch.backward(dys.last().unwrap());
        *dxs.last_mut().unwrap() += &from_new;
        dxs
    }
}

impl Module for Transition {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, conv) in self.existing.iter_mut().enumerate() {
            if let Some(c) = conv {
                c.visit(&join(path, &format!("adapt{i}")), f);
            }
        }
        self.new_branch.visit(&join(path, "new"), f);
    }
}

pub struct DownStep {
    cb: ConvBn,
    relu: Option<Relu>,
}

/// Resamples one source branch to one target branch's resolution and width.
pub enum FusePath {
    Identity,
    /// lower resolution to higher: 1x1 width change then nearest upsample
    Up { cb: ConvBn, up: UpsampleNearest },
    /// higher resolution to lower: chained stride-2 3x3 convolutions
    Down { steps: Vec<DownStep> },
}

impl FusePath {
    /// `gap` = target_index - source_index (positive means downsampling).
    pub fn new(source_width: usize, target_width: usize, gap: isize, rng: &mut Rng) -> Self {
        match gap {
            0 => FusePath::Identity,
            g if g < 0 => FusePath::Up {
                cb: ConvBn::new(source_width, target_width, 1, 1, 0, rng),
                up: UpsampleNearest::new(1 << (-g) as usize),
            },
            g => {
                let g = g as usize;
                let steps = (0..g)
                    .map(|step| {
                        let last = step + 1 == g;
                        let out = if last { target_width } else { source_width };
                        DownStep {
                            cb: ConvBn::new(source_width, out, 3, 2, 1, rng),
                            relu: (!last).then(Relu::new),
                        }
                    })
                    .collect();
                FusePath::Down { steps }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        match self {
            FusePath::Identity => x.clone(),
            FusePath::Up { cb, up } => up.forward(&cb.forward(x, training)),
            FusePath::Down { steps } => {
                let mut z = x.clone();
                for step in steps {
                    z = step.cb.forward(&z, training);
                    if let Some(relu) = &mut step.relu {
                        z = relu.forward(&z, training);
                    }
                }
                z
            }
        }
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        match self {
            FusePath::Identity => dy.clone(),
            FusePath::Up { cb, up } => cb.backward(&up.backward(dy)),
            FusePath::Down { steps } => {
                let mut dz = dy.clone();
                for step in steps.iter_mut().rev() {
                    if let Some(relu) = &mut step.relu {
                        dz = relu.backward(&dz);
                    }
                    dz = step.cb.backward(&dz);
                }
                dz
            }
        }
    }
}

impl Module for FusePath {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            FusePath::Identity => {}
            FusePath::Up { cb, .. } => cb.visit(&join(path, "up"), f),
            FusePath::Down { steps } => {
                for (i, step) in steps.iter_mut().enumerate() {
                    step.cb.visit(&join(path, &format!("down{i}")), f);
                }
            }
        }
    }
}

/// One multi-resolution module: per-branch residual blocks, then every
/// branch receives the resampled sum of all branches.
pub struct HrModule {
    branches: Vec<Vec<BasicBlock>>,
    fuse: Vec<Vec<FusePath>>,
    fuse_relu: Vec<Relu>,
}

impl HrModule {
    pub fn new(widths: &[usize], blocks_per_branch: usize, rng: &mut Rng) -> Self {
        let branches = widths
            .iter()
            .map(|&w| (0..blocks_per_branch).map(|_| BasicBlock::new(w, rng)).collect())
            .collect();
        let fuse = if widths.len() > 1 {
            (0..widths.len())
                .map(|target| {
                    (0..widths.len())
                        .map(|source| {
                            FusePath::new(
                                widths[source],
                                widths[target],
                                target as isize - source as isize,
                                rng,
                            )
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let fuse_relu = (0..widths.len()).map(|_| Relu::new()).collect();
        HrModule {
            branches,
            fuse,
            fuse_relu,
        }
    }

    pub fn forward(&mut self, xs: &[Array4<f64>], training: bool) -> Vec<Array4<f64>> {
        assert_eq!(xs.len(), self.branches.len());
        let mids: Vec<Array4<f64>> = self
            .branches
            .iter_mut()
            .zip(xs)
            .map(|(blocks, x)| {
                let mut z = x.clone();
                for block in blocks {
                    z = block.forward(&z, training);
                }
                z
            })
            .collect();
        if self.fuse.is_empty() {
            return mids;
        }
        let mut outs = Vec::with_capacity(mids.len());
        for (target, paths) in self.fuse.iter_mut().enumerate() {
            let mut acc: Option<Array4<f64>> = None;
            for (source, path) in paths.iter_mut().enumerate() {
                let term = path.forward(&mids[source], training);
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            outs.push(self.fuse_relu[target].forward(&acc.unwrap(), training));
        }
        outs
    }

    pub fn backward(&mut self, dys: &[Array4<f64>]) -> Vec<Array4<f64>> {
        let n = self.branches.len();
        let mut dmids: Vec<Option<Array4<f64>>> = vec![None; n];
        if self.fuse.is_empty() {
            for (slot, dy) in dmids.iter_mut().zip(dys) {
                *slot = Some(dy.clone());
            }
        } else {
            for (target, paths) in self.fuse.iter_mut().enumerate() {
                let dz = self.fuse_relu[target].backward(&dys[target]);
                for (source, path) in paths.iter_mut().enumerate() {
                    let d = path.backward(&dz);
                    dmids[source] = Some(match dmids[source].take() {
                        Some(a) => a + d,
                        None => d,
                    });
                }
            }
        }
        self.branches
            .iter_mut()
            .zip(dmids)
            .map(|(blocks, dmid)| {
                let mut dz = dmid.unwrap();
                for block in blocks.iter_mut().rev() {
                    dz = block.backward(&dz);
                }
                dz
            })
            .collect()
    }
}

impl Module for HrModule {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (r, blocks) in self.branches.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit(&join(path, &format!("branch{r}/block{b}")), f);
            }
        }
        for (t, paths) in self.fuse.iter_mut().enumerate() {
            for (s, p) in paths.iter_mut().enumerate() {
                p.visit(&join(path, &format!("fuse{t}from{s}")), f);
            }
        }
    }
}

/// The augmented output head: per-branch bottlenecks widening to 128 * 2^r,
/// a top-down chain of stride-2 merges, a 1x1 widening, and global pooling.
pub struct HeadBlock {
    incre: Vec<Bottleneck>,
    downsamp: Vec<ConvBnRelu>,
    final_layer: ConvBnRelu,
    pool: GlobalAvgPool,
}

pub const HEAD_MID_BASE: usize = 32;
pub const HEAD_OUT_BASE: usize = 128;

impl HeadBlock {
    pub fn new(branch_widths: &[usize], head_width: usize, rng: &mut Rng) -> Self {
        let n = branch_widths.len();
        let incre = branch_widths
            .iter()
            .enumerate()
            .map(|(r, &w)| Bottleneck::new(w, HEAD_MID_BASE << r, HEAD_OUT_BASE << r, rng))
            .collect();
        let downsamp = (0..n.saturating_sub(1))
            .map(|i| ConvBnRelu::new(HEAD_OUT_BASE << i, HEAD_OUT_BASE << (i + 1), 3, 2, 1, true, rng))
            .collect();
        let final_layer =
            ConvBnRelu::new(HEAD_OUT_BASE << (n - 1), head_width, 1, 1, 0, true, rng);
        HeadBlock {
            incre,
            downsamp,
            final_layer,
            pool: GlobalAvgPool::new(),
        }
    }

    pub fn forward(&mut self, xs: &[Array4<f64>], training: bool) -> ndarray::Array2<f64> {
        assert_eq!(xs.len(), self.incre.len());
        let mut y = self.incre[0].forward(&xs[0], training);
        for i in 1..xs.len() {
            let widened = self.incre[i].forward(&xs[i], training);
            y = widened + self.downsamp[i - 1].forward(&y, training);
        }
        let y = self.final_layer.forward(&y, training);
        self.pool.forward(&y)
    }

    /// Returns gradients for every input branch, highest resolution first.
    pub fn backward(&mut self, dfeat: &ndarray::Array2<f64>) -> Vec<Array4<f64>> {
        let n = self.incre.len();
        let dy = self.pool.backward(dfeat);
        let mut dy = self.final_layer.backward(&dy);
        let mut dxs: Vec<Option<Array4<f64>>> = (0..n).map(|_| None).collect();
        for i in (1..n).rev() {
            dxs[i] = Some(self.incre[i].backward(&dy));
            dy = self.downsamp[i - 1].backward(&dy);
        }
        dxs[0] = Some(self.incre[0].backward(&dy));
        dxs.into_iter().map(Option::unwrap).collect()
    }
}

impl Module for HeadBlock {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (r, b) in self.incre.iter_mut().enumerate() {
            b.visit(&join(path, &format!("incre{r}")), f);
        }
        for (i, d) in self.downsamp.iter_mut().enumerate() {
            d.visit(&join(path, &format!("downsamp{i}")), f);
        }
        self.final_layer.visit(&join(path, "final"), f);
    }
}

//! Per-channel batch normalization over `[N, C, H, W]` maps.

use ndarray::{Array1, Array4, ArrayD, ArrayView4, Axis, IxDyn};

use super::{join, Module, Param};

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    channels: usize,
    cache: Option<Cache>,
}

struct Cache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

fn channel_view(v: &ArrayD<f64>, c: usize) -> ArrayView4<'_, f64> {
    v.view().into_shape_with_order((1, c, 1, 1)).unwrap()
}

fn sum_per_channel(x: &Array4<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1))
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            momentum: 0.1,
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "channel mismatch: got {c}, expected {}", self.channels);
        if training {
            let m = (n * h * w) as f64;
            assert!(m > 1.0, "batch statistics need more than one value per channel");
            let mean = sum_per_channel(x) / m;
            let mean_b = mean.view().into_shape_with_order((1, c, 1, 1)).unwrap();
            let centered = x - &mean_b;
            let var = sum_per_channel(&centered.mapv(|v| v * v)) / m;
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let inv_b = inv_std.view().into_shape_with_order((1, c, 1, 1)).unwrap();
            let x_hat = &centered * &inv_b;
            let y = &x_hat * &channel_view(&self.gamma.value, c)
                + &channel_view(&self.beta.value, c);

            // running stats use the unbiased variance, as the eval path expects
            let unbiased = &var * (m / (m - 1.0));
            for ch in 0..c {
                let rm = &mut self.running_mean.value[[ch]];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch];
                let rv = &mut self.running_var.value[[ch]];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased[ch];
            }
            self.cache = Some(Cache { x_hat, inv_std });
            y
        } else {
            self.cache = None;
            let mean = &self.running_mean.value;
            let var = &self.running_var.value;
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let x_hat = (x - &channel_view(mean, c)) * &channel_view(&inv_std, c);
            &x_hat * &channel_view(&self.gamma.value, c) + &channel_view(&self.beta.value, c)
        }
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self
            .cache
            .as_ref()
            .expect("batchnorm backward without a training-mode forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;

        let dgamma = sum_per_channel(&(dy * &cache.x_hat));
        let dbeta = sum_per_channel(dy);

        let dxhat = dy * &channel_view(&self.gamma.value, c);
        let s1 = sum_per_channel(&dxhat);
        let s2 = sum_per_channel(&(&dxhat * &cache.x_hat));
        let s1_b = s1.view().into_shape_with_order((1, c, 1, 1)).unwrap();
        let s2_b = s2.view().into_shape_with_order((1, c, 1, 1)).unwrap();
        let inv_b = cache.inv_std.view().into_shape_with_order((1, c, 1, 1)).unwrap();
        let dx = (&dxhat * m - &s1_b - &cache.x_hat * &s2_b) * &inv_b / m;

        for (gp, add) in [(&mut self.gamma, dgamma), (&mut self.beta, dbeta)] {
            let g = gp.grad_mut();
            for ch in 0..c {
                g[[ch]] += add[ch];
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(path, "gamma"), &mut self.gamma);
        f(&join(path, "beta"), &mut self.beta);
        f(&join(path, "running_mean"), &mut self.running_mean);
        f(&join(path, "running_var"), &mut self.running_var);
    }
}

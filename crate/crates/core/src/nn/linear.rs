//! Fully-connected layer on `[N, D]` feature matrices.

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use super::rng::Rng;
use super::{join, Module, Param};

pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    /// Weights drawn from N(0, 0.01), bias zero.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Param::new(rng.normal_tensor(&[out_dim, in_dim], 0.01)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_dim]))),
            in_dim,
            out_dim,
            cache: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn forward(&mut self, x: &Array2<f64>, training: bool) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim, "feature width mismatch");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = x.dot(&w.t()) + &b;
        self.cache = training.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache
            .as_ref()
            .expect("linear backward without a training-mode forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = dy.dot(&w);
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let mut wg = self
            .weight
            .grad_mut()
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap();
        wg += &dw;
        let mut bg = self
            .bias
            .grad_mut()
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        bg += &db;
        dx
    }
}

impl Module for Linear {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(path, "weight"), &mut self.weight);
        f(&join(path, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::fdcheck::{central_diff, rel_err};
    use super::*;

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = Rng::seed_from_u64(1);
        let mut lin = Linear::new(4, 3, &mut rng);
        let y = lin.forward(&Array2::zeros((2, 4)), false);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_affine() {
        let mut rng = Rng::seed_from_u64(2);
        let mut lin = Linear::new(3, 2, &mut rng);
        lin.bias.value[[0]] = 0.5;
        let a = Array2::from_shape_fn((1, 3), |_| rng.normal());
        let b = Array2::from_shape_fn((1, 3), |_| rng.normal());
        let alpha = 0.3;
        let mixed = &a * alpha + &b * (1.0 - alpha);
        let y_mixed = lin.forward(&mixed, false);
        let y_a = lin.forward(&a, false);
        let y_b = lin.forward(&b, false);
        let want = &y_a * alpha + &y_b * (1.0 - alpha);
        assert!((&y_mixed - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |_| rng.normal());
        let proj = Array2::from_shape_fn((2, 3), |_| rng.normal());

        lin.forward(&x, true);
        let dx = lin.backward(&proj);

        let mut x_probe = x.clone();
        for idx in [[0, 0], [1, 3], [0, 2]] {
            let analytic = dx[idx];
            let fd = central_diff(
                &mut |d| {
                    x_probe[idx] += d;
                    let v = (&lin.forward(&x_probe, false) * &proj).sum();
                    x_probe[idx] -= d;
                    v
                },
                1e-5,
            );
            assert!(rel_err(analytic, fd) < 1e-7, "dx {analytic} vs {fd}");
        }

        for idx in [[0, 0], [2, 3], [1, 1]] {
            let analytic = lin.weight.grad.as_ref().unwrap()[IxDyn(&idx)];
            let fd = central_diff(
                &mut |d| {
                    lin.weight.value[IxDyn(&idx)] += d;
                    let v = (&lin.forward(&x, false) * &proj).sum();
                    lin.weight.value[IxDyn(&idx)] -= d;
                    v
                },
                1e-5,
            );
            assert!(rel_err(analytic, fd) < 1e-7, "dw {analytic} vs {fd}");
        }

        let analytic = lin.bias.grad.as_ref().unwrap()[[1]];
        let fd = central_diff(
            &mut |d| {
                lin.bias.value[[1]] += d;
                let v = (&lin.forward(&x, false) * &proj).sum();
                lin.bias.value[[1]] -= d;
                v
            },
            1e-5,
        );
        assert!(rel_err(analytic, fd) < 1e-7, "db {analytic} vs {fd}");
    }
}

//! Parameter-free layers: ReLU, nearest-neighbor upsampling, global pooling.

use ndarray::{Array2, Array4};

pub struct Relu {
    mask: Option<Array4<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        if training {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        } else {
            self.mask = None;
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mask = self
            .mask
            .as_ref()
            .expect("relu backward without a training-mode forward");
        dy * mask
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

/// Integer-factor nearest-neighbor upsampling.
pub struct UpsampleNearest {
    pub factor: usize,
}

impl UpsampleNearest {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1);
        UpsampleNearest { factor }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let f = self.factor;
        Array4::from_shape_fn((n, c, h * f, w * f), |(ni, ci, i, j)| {
            x[[ni, ci, i / f, j / f]]
        })
    }

    /// Adjoint of forward: sums each factor-by-factor block.
    pub fn backward(&self, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, hf, wf) = dy.dim();
        let f = self.factor;
        assert!(hf % f == 0 && wf % f == 0);
        let mut dx = Array4::zeros((n, c, hf / f, wf / f));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..hf {
                    for j in 0..wf {
                        dx[[ni, ci, i / f, j / f]] += dy[[ni, ci, i, j]];
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial extent: `[N, C, H, W]` to `[N, C]`.
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { hw: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.hw = Some((h, w));
        let scale = 1.0 / (h * w) as f64;
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x[[ni, ci, i, j]];
                    }
                }
                y[[ni, ci]] = acc * scale;
            }
        }
        y
    }

    pub fn backward(&self, dy: &Array2<f64>) -> Array4<f64> {
        let (h, w) = self.hw.expect("pool backward without a forward");
        let (n, c) = dy.dim();
        let scale = 1.0 / (h * w) as f64;
        Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy[[ni, ci]] * scale)
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::super::rng::Rng;
    use super::*;

    fn random4(rng: &mut Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.normal())
    }

    #[test]
    fn relu_clamps_and_masks() {
        let mut relu = Relu::new();
        let x = ndarray::array![[[[-1.0, 0.0], [2.0, -0.5]]]];
        let y = relu.forward(&x, true);
        assert_eq!(y, ndarray::array![[[[0.0, 0.0], [2.0, 0.0]]]]);
        let dy = Array4::ones((1, 1, 2, 2));
        let dx = relu.backward(&dy);
        assert_eq!(dx, ndarray::array![[[[0.0, 0.0], [1.0, 0.0]]]]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let up = UpsampleNearest::new(2);
        let x = ndarray::array![[[[1.0, 2.0], [3.0, 4.0]]]];
        let y = up.forward(&x);
        assert_eq!(
            y,
            ndarray::array![[[
                [1.0, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
                [3.0, 3.0, 4.0, 4.0],
                [3.0, 3.0, 4.0, 4.0]
            ]]]
        );
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        // <up(x), y> == <x, up_adjoint(y)> pins the backward exactly
        let mut rng = Rng::seed_from_u64(5);
        let up = UpsampleNearest::new(3);
        let x = random4(&mut rng, (2, 2, 3, 4));
        let y = random4(&mut rng, (2, 2, 9, 12));
        let lhs = (&up.forward(&x) * &y).sum();
        let rhs = (&x * &up.backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn pool_averages_and_distributes() {
        let mut pool = GlobalAvgPool::new();
        let x = ndarray::array![[[[1.0, 2.0], [3.0, 6.0]]]];
        let y = pool.forward(&x);
        assert_eq!(y[[0, 0]], 3.0);
        let dy = Array2::from_elem((1, 1), 8.0);
        let dx = pool.backward(&dy);
        assert!(dx.iter().all(|v| (*v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn pool_backward_is_the_adjoint() {
        let mut rng = Rng::seed_from_u64(6);
        let mut pool = GlobalAvgPool::new();
        let x = random4(&mut rng, (3, 4, 5, 2));
        let y = Array2::from_shape_fn((3, 4), |_| rng.normal());
        let lhs = (&pool.forward(&x) * &y).sum();
        let rhs = (&x * &pool.backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

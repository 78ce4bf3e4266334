//! 2-D convolution via im2col and matrix multiplication.

use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Ix1};

use super::rng::Rng;
use super::{join, Module, Param};

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    /// Square-kernel convolution; weight init is He-normal over the fan-out.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0);
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let weight = Param::new(rng.normal_tensor(&[out_ch, in_ch, kernel, kernel], std));
        let bias = with_bias.then(|| Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch]))));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            in_ch,
            out_ch,
            kernel,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel,
            "input {h}x{w} smaller than kernel {}",
            self.kernel
        );
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "channel mismatch: got {c}, expected {}", self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, ckk))
            .unwrap();

        let mut y = Array4::zeros((n, self.out_ch, oh, ow));
        let pointwise = self.kernel == 1 && self.stride == 1 && self.padding == 0;
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let yi = if pointwise {
                let flat = xi.into_shape_with_order((c, h * w)).unwrap();
                w_mat.dot(&flat)
            } else {
                let col = im2col(xi, self.kernel, self.stride, self.padding, oh, ow);
                w_mat.dot(&col)
            };
            y.index_axis_mut(Axis(0), i)
                .assign(&yi.into_shape_with_order((self.out_ch, oh, ow)).unwrap());
        }
        if let Some(b) = &self.bias {
            let bv = b
                .value
                .view()
                .into_shape_with_order((1, self.out_ch, 1, 1))
                .unwrap();
            y += &bv;
        }
        self.cache = training.then(|| x.clone());
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache
            .as_ref()
            .expect("conv backward without a training-mode forward");
        let (n, c, h, w) = x.dim();
        let (_, o, oh, ow) = dy.dim();
        assert_eq!(o, self.out_ch);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, ckk))
            .unwrap();

        let mut dw = Array2::<f64>::zeros((self.out_ch, ckk));
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let pointwise = self.kernel == 1 && self.stride == 1 && self.padding == 0;
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let dyi = dy.index_axis(Axis(0), i);
            let dy_mat = dyi.into_shape_with_order((self.out_ch, oh * ow)).unwrap();
            if pointwise {
                let flat = xi.into_shape_with_order((c, h * w)).unwrap();
                dw += &dy_mat.dot(&flat.t());
                let dflat = w_mat.t().dot(&dy_mat);
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dflat.into_shape_with_order((c, h, w)).unwrap());
            } else {
                let col = im2col(xi, self.kernel, self.stride, self.padding, oh, ow);
                dw += &dy_mat.dot(&col.t());
                let dcol = w_mat.t().dot(&dy_mat);
                col2im_add(
                    dcol.view(),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                    &mut dx.index_axis_mut(Axis(0), i),
                );
            }
        }

        let wg = self.weight.grad_mut();
        let mut wg2 = wg.view_mut().into_shape_with_order((self.out_ch, ckk)).unwrap();
        wg2 += &dw;
        if let Some(b) = &mut self.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let mut bg = b.grad_mut().view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &db;
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(path, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(path, "bias"), b);
        }
    }
}

/// Unrolls `[C, H, W]` into `[C*K*K, OH*OW]`; out-of-bounds taps read zero.
fn im2col(
    x: ArrayView3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * kernel * kernel, oh * ow));
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let mut out_row = col.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[base + oj] = x[[ch, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `[C*K*K, OH*OW]` gradient back onto the input layout.
fn col2im_add(
    dcol: ndarray::ArrayView2<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut ArrayViewMut3<f64>,
) {
    let (c, h, w) = dx.dim();
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ch, ii as usize, jj as usize]] += dcol[[row, base + oj]];
                    }
                }
            }
        }
    }
}

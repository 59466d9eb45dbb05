//! Strided convolution and its transpose, both built on the im2col GEMM.
//!
//! The transposed convolution is implemented literally as the adjoint of a
//! convolution with the same (kernel, stride, padding) geometry, so the two
//! layers share gradient machinery and the finite-difference checks cover
//! both directions with no special cases.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::Rng;

use crate::nn::ops::{col2im, conv_out_len, im2col};
use crate::nn::{xavier_limit, ParamTensors};

/// Standard strided convolution. Weight layout (out_c, in_c, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

/// Per-sample patch matrices retained for the backward pass.
pub struct ConvCache<F> {
    cols: Vec<Array2<F>>,
    in_hw: (usize, usize),
}

impl<F: NdFloat> Conv2d<F> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = xavier_limit::<F>(in_c * k * k, out_c * k * k);
        let weight = Array4::from_shape_fn((out_c, in_c, k, k), |_| {
            F::from(rng.random_range(-1.0..1.0)).unwrap() * limit
        });
        Self {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_mat(&self) -> Array2<F> {
        let (oc, ic, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .unwrap()
            .to_owned()
    }

    /// Input (n, in_c, h, w) -> output (n, out_c, oh, ow).
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, _ic, h, w) = x.dim();
        let (oc, _, k, _) = self.weight.dim();
        let oh = conv_out_len(h, k, self.stride, self.pad);
        let ow = conv_out_len(w, k, self.stride, self.pad);
        let w_mat = self.weight_mat();
        let mut y = Array4::zeros((n, oc, oh, ow));
        let mut cols_all = Vec::with_capacity(n);
        for i in 0..n {
            let cols = im2col(x.index_axis(ndarray::Axis(0), i), k, self.stride, self.pad);
            let mut y_mat = w_mat.dot(&cols);
            for (co, mut row) in y_mat.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v + self.bias[co]);
            }
            y.index_axis_mut(ndarray::Axis(0), i)
                .assign(&y_mat.into_shape_with_order((oc, oh, ow)).unwrap());
            cols_all.push(cols);
        }
        (
            y,
            ConvCache {
                cols: cols_all,
                in_hw: (h, w),
            },
        )
    }

    /// Returns (grad_input, grad_params).
    pub fn backward(&self, dy: &Array4<F>, cache: &ConvCache<F>) -> (Array4<F>, Self) {
        let (n, oc, oh, ow) = dy.dim();
        let (_, ic, k, _) = self.weight.dim();
        let (h, w) = cache.in_hw;
        let w_mat = self.weight_mat();
        let mut dx = Array4::zeros((n, ic, h, w));
        let mut dw_mat = Array2::<F>::zeros((oc, ic * k * k));
        let mut db = Array1::<F>::zeros(oc);
        for i in 0..n {
            let dy_mat = dy
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((oc, oh * ow))
                .unwrap()
                .to_owned();
            dw_mat = dw_mat + dy_mat.dot(&cache.cols[i].t());
            db = db + dy_mat.sum_axis(ndarray::Axis(1));
            let dcols = w_mat.t().dot(&dy_mat);
            dx.index_axis_mut(ndarray::Axis(0), i)
                .assign(&col2im(dcols.view(), ic, h, w, k, self.stride, self.pad));
        }
        let grads = Self {
            weight: dw_mat.into_shape_with_order((oc, ic, k, k)).unwrap(),
            bias: db,
            stride: self.stride,
            pad: self.pad,
        };
        (dx, grads)
    }
}

impl<F: NdFloat> ParamTensors<F> for Conv2d<F> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn visit(&self, f: &mut impl FnMut(&[F])) {
        f(self.weight.as_slice().unwrap());
        f(self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        f(self.weight.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap());
    }

    fn visit_mut_pair(&mut self, other: &Self, f: &mut impl FnMut(&mut [F], &[F])) {
        f(
            self.weight.as_slice_mut().unwrap(),
            other.weight.as_slice().unwrap(),
        );
        f(
            self.bias.as_slice_mut().unwrap(),
            other.bias.as_slice().unwrap(),
        );
    }
}

/// Transposed (fractionally strided) convolution. Weight layout
/// (in_c, out_c, k, k); `out_pad` resolves the output-size ambiguity of
/// strided convolution, as in the usual deconvolution formulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub struct ConvTCache<F> {
    x_mats: Vec<Array2<F>>,
    in_hw: (usize, usize),
}

impl<F: NdFloat> ConvTranspose2d<F> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(out_pad < stride, "out_pad must be < stride");
        let limit = xavier_limit::<F>(in_c * k * k, out_c * k * k);
        let weight = Array4::from_shape_fn((in_c, out_c, k, k), |_| {
            F::from(rng.random_range(-1.0..1.0)).unwrap() * limit
        });
        Self {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        let k = self.weight.dim().2;
        (in_len - 1) * self.stride + k + self.out_pad - 2 * self.pad
    }

    fn weight_mat(&self) -> Array2<F> {
        let (ic, oc, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((ic, oc * k * k))
            .unwrap()
            .to_owned()
    }

    /// Input (n, in_c, h, w) -> output (n, out_c, OH, OW): the adjoint
    /// scatter of a stride-`s` convolution, plus bias.
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvTCache<F>) {
        let (n, ic, h, w) = x.dim();
        let (_, oc, k, _) = self.weight.dim();
        let oh = self.out_len(h);
        let ow = self.out_len(w);
        // Geometry sanity: the reverse convolution over the output must land
        // exactly back on (h, w).
        debug_assert_eq!(conv_out_len(oh, k, self.stride, self.pad), h);
        debug_assert_eq!(conv_out_len(ow, k, self.stride, self.pad), w);
        let w_mat = self.weight_mat();
        let mut y = Array4::zeros((n, oc, oh, ow));
        let mut x_mats = Vec::with_capacity(n);
        for i in 0..n {
            let x_mat = x
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((ic, h * w))
                .unwrap()
                .to_owned();
            let cols = w_mat.t().dot(&x_mat);
            let mut out = col2im(cols.view(), oc, oh, ow, k, self.stride, self.pad);
            for (co, mut plane) in out.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v + self.bias[co]);
            }
            y.index_axis_mut(ndarray::Axis(0), i).assign(&out);
            x_mats.push(x_mat);
        }
        (
            y,
            ConvTCache {
                x_mats,
                in_hw: (h, w),
            },
        )
    }

    pub fn backward(&self, dy: &Array4<F>, cache: &ConvTCache<F>) -> (Array4<F>, Self) {
        let (n, oc, _oh, _ow) = dy.dim();
        let (ic, _, k, _) = self.weight.dim();
        let (h, w) = cache.in_hw;
        let w_mat = self.weight_mat();
        let mut dx = Array4::zeros((n, ic, h, w));
        let mut dw_mat = Array2::<F>::zeros((ic, oc * k * k));
        let mut db = Array1::<F>::zeros(oc);
        for i in 0..n {
            let dy_i = dy.index_axis(ndarray::Axis(0), i);
            let dcols = im2col(dy_i, k, self.stride, self.pad);
            let dx_mat = w_mat.dot(&dcols);
            dx.index_axis_mut(ndarray::Axis(0), i)
                .assign(&dx_mat.into_shape_with_order((ic, h, w)).unwrap());
            dw_mat = dw_mat + cache.x_mats[i].dot(&dcols.t());
            for co in 0..oc {
                db[co] = db[co] + dy_i.index_axis(ndarray::Axis(0), co).sum();
            }
        }
        let grads = Self {
            weight: dw_mat.into_shape_with_order((ic, oc, k, k)).unwrap(),
            bias: db,
            stride: self.stride,
            pad: self.pad,
            out_pad: self.out_pad,
        };
        (dx, grads)
    }
}

impl<F: NdFloat> ParamTensors<F> for ConvTranspose2d<F> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            pad: self.pad,
            out_pad: self.out_pad,
        }
    }

    fn visit(&self, f: &mut impl FnMut(&[F])) {
        f(self.weight.as_slice().unwrap());
        f(self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        f(self.weight.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap());
    }

    fn visit_mut_pair(&mut self, other: &Self, f: &mut impl FnMut(&mut [F], &[F])) {
        f(
            self.weight.as_slice_mut().unwrap(),
            other.weight.as_slice().unwrap(),
        );
        f(
            self.bias.as_slice_mut().unwrap(),
            other.bias.as_slice().unwrap(),
        );
    }
}

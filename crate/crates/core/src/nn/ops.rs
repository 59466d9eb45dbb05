//! Shared tensor primitives: im2col/col2im patch extraction and the pointwise
//! nonlinearities used across the encoder and decoder.
//!
//! The im2col/col2im pair is the workhorse: convolution forward, convolution
//! backward, and both directions of transposed convolution all reduce to one
//! GEMM against patch matrices. col2im is the exact adjoint of im2col, which
//! the tests verify via the inner-product identity.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, NdFloat};

/// Number of valid kernel positions along one axis.
pub fn conv_out_len(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Extract kernel patches of one (C, H, W) sample into a (C·k·k, OH·OW)
/// matrix. Out-of-bounds taps (from padding) contribute zeros.
pub fn im2col<F: NdFloat>(input: ArrayView3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = input.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add a (C·k·k, OH·OW) patch matrix back onto a
/// (C, H, W) canvas. Overlapping taps accumulate.
pub fn col2im<F: NdFloat>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, oh * ow));
    let mut img = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[ci, iy as usize, ix as usize]] =
                            img[[ci, iy as usize, ix as usize]] + cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    img
}

/// Elementwise tanh.
pub fn tanh_forward<F: NdFloat, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    x.mapv(|v| v.tanh())
}

/// Gradient through tanh given the *activated* output y = tanh(x).
pub fn tanh_backward<F: NdFloat, D: ndarray::Dimension>(
    dy: &ndarray::Array<F, D>,
    y: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &a| *g = *g * (F::one() - a * a));
    dx
}

pub fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction for stability. Each row of the
/// result is a probability vector.
pub fn softmax_rows<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_array3(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut r = rng::chacha(seed);
        Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.0..1.0))
    }

    /// Naive direct convolution used as an oracle for the GEMM path.
    fn conv_naive(
        x: &Array3<f64>,
        w: &ndarray::Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (c_in, h, wid) = x.dim();
        let (c_out, c_in2, k, _) = w.dim();
        assert_eq!(c_in, c_in2);
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wid, k, stride, pad);
        let mut y = Array3::zeros((c_out, oh, ow));
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                acc += x[[ci, iy as usize, ix as usize]]
                                    * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    y[[co, oy, ox]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_naive_convolution() {
        for (seed, c_in, c_out, h, k, s, p) in [
            (1, 1, 2, 5, 3, 1, 1),
            (2, 3, 4, 8, 3, 2, 1),
            (3, 2, 2, 7, 2, 1, 0),
            (4, 4, 1, 6, 3, 2, 0),
        ] {
            let x = random_array3(seed, c_in, h, h);
            let mut r = rng::chacha(seed + 100);
            let w =
                ndarray::Array4::from_shape_fn((c_out, c_in, k, k), |_| r.random_range(-1.0..1.0));
            let cols = im2col(x.view(), k, s, p);
            let w_mat = w
                .view()
                .into_shape_with_order((c_out, c_in * k * k))
                .unwrap()
                .to_owned();
            let y_mat = w_mat.dot(&cols);
            let oh = conv_out_len(h, k, s, p);
            let y = y_mat.into_shape_with_order((c_out, oh, oh)).unwrap();
            let y_ref = conv_naive(&x, &w, s, p);
            let max_err = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-12, "GEMM conv deviates from naive: {max_err}");
        }
    }

    #[test]
    fn col2im_is_the_exact_adjoint_of_im2col() {
        // <im2col(x), C> must equal <x, col2im(C)> for random x and C.
        for seed in 0..5u64 {
            let (c, h, k, s, p) = (2usize, 6usize, 3usize, 2usize, 1usize);
            let x = random_array3(seed, c, h, h);
            let oh = conv_out_len(h, k, s, p);
            let mut r = rng::chacha(seed + 50);
            let cmat =
                Array2::from_shape_fn((c * k * k, oh * oh), |_| r.random_range(-1.0..1.0));
            let lhs: f64 = im2col(x.view(), k, s, p)
                .iter()
                .zip(cmat.iter())
                .map(|(a, b)| a * b)
                .sum();
            let back = col2im(cmat.view(), c, h, h, k, s, p);
            let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint identity broken");
        }
    }

    #[test]
    fn softmax_rows_are_simplex_points() {
        let logits = Array2::from_shape_fn((20, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin() * 30.0);
        let probs = softmax_rows(&logits);
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = Array2::from_shape_vec((1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let b = a.mapv(|v| v + 100.0);
        let pa = softmax_rows(&a);
        let pb = softmax_rows(&b);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

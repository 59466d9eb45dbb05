//! Fully connected layer.

use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;

use crate::nn::{xavier_limit, ParamTensors};

/// Affine map y = x Wᵀ + b. Weight layout (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = xavier_limit::<F>(in_dim, out_dim);
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| {
            F::from(rng.random_range(-1.0..1.0)).unwrap() * limit
        });
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim().0
    }

    /// Input (n, in) -> output (n, out).
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    /// Returns (grad_input, grad_params). `x` is the forward input.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>) -> (Array2<F>, Self) {
        let dx = dy.dot(&self.weight);
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(ndarray::Axis(0));
        (
            dx,
            Self {
                weight: dw,
                bias: db,
            },
        )
    }
}

impl<F: NdFloat> ParamTensors<F> for Linear<F> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
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

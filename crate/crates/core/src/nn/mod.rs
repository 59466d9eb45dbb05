//! Minimal neural-network toolkit: conv / transposed-conv / linear layers
//! with hand-derived backward passes, plus SGD-with-momentum updates.
//!
//! Everything is generic over the float type. The pipeline runs in f32; the
//! gradient-check tests instantiate the exact same code in f64 so the
//! finite-difference tolerances are meaningful.

pub mod conv;
pub mod linear;
pub mod ops;

use ndarray::NdFloat;

pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

/// Glorot-uniform initialization limit.
pub fn xavier_limit<F: NdFloat>(fan_in: usize, fan_out: usize) -> F {
    F::from((6.0 / (fan_in + fan_out) as f64).sqrt()).unwrap()
}

/// Uniform access to a structure's trainable tensors as flat slices. One
/// struct type serves three roles — parameters, gradients, and optimizer
/// velocity — so the visitors must enumerate tensors in a fixed order.
pub trait ParamTensors<F: NdFloat> {
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn visit(&self, f: &mut impl FnMut(&[F]));

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [F]));

    /// Visit corresponding tensors of two structurally identical values.
    fn visit_mut_pair(&mut self, other: &Self, f: &mut impl FnMut(&mut [F], &[F]));

    /// Elementwise self += other (gradient accumulation across chunks).
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        self.visit_mut_pair(other, &mut |a, b| {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        });
    }

    /// Elementwise self *= s.
    fn scale(&mut self, s: F) {
        self.visit_mut(&mut |a| {
            for x in a.iter_mut() {
                *x = *x * s;
            }
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |a| n += a.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |a| {
            if a.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Classic momentum update: v ← momentum·v + g, θ ← θ − lr·v.
    fn sgd_step(&mut self, grad: &Self, velocity: &mut Self, lr: F, momentum: F)
    where
        Self: Sized,
    {
        velocity.visit_mut_pair(grad, &mut |v, g| {
            for (x, &y) in v.iter_mut().zip(g) {
                *x = momentum * *x + y;
            }
        });
        self.visit_mut_pair(velocity, &mut |p, v| {
            for (x, &y) in p.iter_mut().zip(v) {
                *x = *x - lr * y;
            }
        });
    }
}

//! Training objective: prototype-reconstruction BCE, latent KL regularizer,
//! and optional classification cross-entropy through the latent mean.
//!
//! All functions return per-batch *sums* plus gradients of the summed
//! objective. Callers divide by the sample count; keeping sums makes
//! gradient accumulation across parallel chunks exact and order-free.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ops::softmax_rows;
use crate::nn::ParamTensors;
use crate::rng;
use crate::vpe::VpeParams;

/// Summed loss terms over one batch. `total` already applies the term
/// weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossSums<F> {
    pub recon: F,
    pub kl: F,
    pub ce: F,
    pub count: usize,
    pub total: F,
}

impl<F: NdFloat> LossSums<F> {
    pub fn merge(&mut self, other: &Self) {
        self.recon = self.recon + other.recon;
        self.kl = self.kl + other.kl;
        self.ce = self.ce + other.ce;
        self.total = self.total + other.total;
        self.count += other.count;
    }

    pub fn mean_recon(&self) -> F {
        self.recon / F::from(self.count.max(1)).unwrap()
    }

    pub fn mean_kl(&self) -> F {
        self.kl / F::from(self.count.max(1)).unwrap()
    }

    pub fn mean_total(&self) -> F {
        self.total / F::from(self.count.max(1)).unwrap()
    }
}

/// Seeded standard-normal noise for the reparameterization trick. The stream
/// is keyed by sample index, so results do not depend on batch chunking.
pub fn sample_eps<F: NdFloat>(seed: u64, sample_idx: usize, d_z: usize) -> Array1<F> {
    let mut r = rng::chacha(rng::derive(seed, "eps", sample_idx as u64));
    Array1::from_shape_fn(d_z, |_| {
        let v: f64 = StandardNormal.sample(&mut r);
        F::from(v).unwrap()
    })
}

/// Numerically stable binary cross-entropy with logits, summed over all
/// elements: Σ max(l,0) − l·t + ln(1 + e^{−|l|}).
pub fn bce_with_logits_sum<F: NdFloat, D: ndarray::Dimension>(
    logits: &ndarray::Array<F, D>,
    targets: &ndarray::Array<F, D>,
) -> F {
    logits
        .iter()
        .zip(targets.iter())
        .map(|(&l, &t)| l.max(F::zero()) - l * t + (F::one() + (-l.abs()).exp()).ln())
        .fold(F::zero(), |a, b| a + b)
}

/// KL(N(μ, σ²) ‖ N(0, I)) summed over dimensions and samples:
/// ½ Σ (μ² + e^lv − 1 − lv).
pub fn kl_sum<F: NdFloat>(mu: &Array2<F>, logvar: &Array2<F>) -> F {
    let half = F::from(0.5).unwrap();
    mu.iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .fold(F::zero(), |a, b| a + b)
}

/// Full forward/backward of the summed objective
/// Σᵢ BCE(decode(zᵢ), targetᵢ) + kl_weight·KLᵢ + ce_weight·CEᵢ
/// with zᵢ = μᵢ + σᵢ⊙εᵢ(seed). Labels enable the cross-entropy term on the
/// latent mean through the linear head (and its gradient into the encoder).
pub fn vpe_loss<F: NdFloat>(
    params: &VpeParams<F>,
    images: Array4<F>,
    targets: &Array4<F>,
    labels: Option<&[u32]>,
    kl_weight: F,
    ce_weight: F,
    seed: u64,
    sample_offset: usize,
) -> Result<(LossSums<F>, VpeParams<F>)> {
    let n = images.dim().0;
    debug_assert_eq!(targets.dim(), images.dim());
    if let Some(ls) = labels {
        debug_assert_eq!(ls.len(), n);
    }

    let enc = params.encode_forward(images);
    let d_z = params.d_z;

    // Reparameterization: z = μ + e^{lv/2} ⊙ ε.
    let mut eps = Array2::<F>::zeros((n, d_z));
    for i in 0..n {
        eps.row_mut(i)
            .assign(&sample_eps::<F>(seed, sample_offset + i, d_z));
    }
    let sigma = enc.logvar.mapv(|lv| (lv * F::from(0.5).unwrap()).exp());
    let z = &enc.mu + &(&sigma * &eps);

    let dec = params.decode_forward(z);

    let recon = bce_with_logits_sum(&dec.logits, targets);
    let kl = kl_sum(&enc.mu, &enc.logvar);

    let mut grads = params.zeros_like();

    // dBCE/dlogit = σ(logit) − target, elementwise on the summed objective.
    let mut dlogits = dec.logits.mapv(crate::nn::ops::sigmoid);
    dlogits.zip_mut_with(targets, |g, &t| *g = *g - t);
    let dz = params.decode_backward(&dec, &dlogits, &mut grads);

    // Chain through the reparameterization.
    let mut dmu = dz.clone();
    let mut dlogvar = &dz * &(&sigma * &eps) * F::from(0.5).unwrap();

    // KL gradients: d/dμ = μ, d/dlv = ½(e^lv − 1).
    dmu.zip_mut_with(&enc.mu, |g, &m| *g = *g + kl_weight * m);
    dlogvar.zip_mut_with(&enc.logvar, |g, &lv| {
        *g = *g + kl_weight * F::from(0.5).unwrap() * (lv.exp() - F::one())
    });

    // Optional classification term on the latent mean.
    let mut ce = F::zero();
    if let Some(ls) = labels {
        if ce_weight > F::zero() {
            let logits_u = params.head.forward(&enc.mu);
            let probs = softmax_rows(&logits_u);
            let mut du = probs.clone();
            for (i, &label) in ls.iter().enumerate() {
                let k = label as usize;
                // Stable CE: logsumexp(u) − u_label.
                let row = logits_u.row(i);
                let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let lse = max
                    + row
                        .iter()
                        .map(|&v| (v - max).exp())
                        .fold(F::zero(), |a, b| a + b)
                        .ln();
                ce = ce + lse - row[k];
                du[[i, k]] = du[[i, k]] - F::one();
            }
            du.mapv_inplace(|v| v * ce_weight);
            let (dmu_ce, g_head) = params.head.backward(&enc.mu, &du);
            grads.head.accumulate(&g_head);
            dmu = dmu + dmu_ce;
        }
    }

    params.encode_backward(&enc, &dmu, &dlogvar, &mut grads);

    let total = recon + kl_weight * kl + ce_weight * ce;
    for (name, value) in [("reconstruction", recon), ("kl", kl), ("cross-entropy", ce)] {
        if !value.is_finite() {
            return Err(Error::numerical(name, "non-finite loss term"));
        }
    }

    Ok((
        LossSums {
            recon,
            kl,
            ce,
            count: n,
            total,
        },
        grads,
    ))
}

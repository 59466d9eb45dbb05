//! Seeded SGD training loop for the encoder/decoder, plus the post-hoc
//! linear-head fit on frozen latent means.
//!
//! Batches are cut into fixed-size chunks processed in parallel; chunk
//! gradients are merged in chunk order, so results are bit-identical
//! regardless of worker-thread count.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::nn::ops::softmax_rows;
use crate::nn::ParamTensors;
use crate::rng;
use crate::vpe::loss::vpe_loss;
use crate::vpe::{compute_centroids, EncodeMode, PrototypeCatalog, VpeParams};

/// Samples per parallel gradient chunk. Fixed (not thread-count-derived) to
/// keep float summation order stable.
pub const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    /// Fraction of epochs over which kl_weight ramps linearly from ~0.
    pub kl_warmup_frac: f64,
    /// Weight of the head cross-entropy term. 0 keeps initial training
    /// purely reconstruction-driven; the head is then fitted post hoc.
    pub ce_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            kl_weight: 1e-3,
            kl_warmup_frac: 0.2,
            ce_weight: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_recon: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
}

/// Write the per-epoch loss log as CSV (`epoch,loss_recon,loss_kl,loss_total`).
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in log {
        writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Map class_id -> prototype pixels for reconstruction targets.
pub(crate) fn target_table(catalog: &PrototypeCatalog) -> BTreeMap<u32, Array3<f32>> {
    catalog
        .entries
        .iter()
        .map(|e| (e.class_id, e.prototype.data().clone()))
        .collect()
}

pub(crate) fn assemble_batch(
    data: &[LabeledSample],
    indices: &[usize],
    targets: &BTreeMap<u32, Array3<f32>>,
    canvas: usize,
) -> (Array4<f32>, Array4<f32>, Vec<u32>) {
    let n = indices.len();
    let mut x = Array4::zeros((n, 3, canvas, canvas));
    let mut t = Array4::zeros((n, 3, canvas, canvas));
    let mut labels = Vec::with_capacity(n);
    for (row, &idx) in indices.iter().enumerate() {
        let sample = &data[idx];
        x.index_axis_mut(Axis(0), row).assign(sample.image.data());
        t.index_axis_mut(Axis(0), row).assign(&targets[&sample.label]);
        labels.push(sample.label);
    }
    (x, t, labels)
}

/// One optimizer step over a batch: chunked parallel forward/backward,
/// ordered merge, mean-scaled SGD update. Returns the batch loss sums.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut VpeParams<f32>,
    velocity: &mut VpeParams<f32>,
    data: &[LabeledSample],
    indices: &[usize],
    targets: &BTreeMap<u32, Array3<f32>>,
    kl_weight: f32,
    ce_weight: f32,
    eps_seed: u64,
    lr: f32,
    momentum: f32,
) -> Result<crate::vpe::LossSums<f32>> {
    let canvas = params.canvas;
    let chunk_results: Vec<Result<(crate::vpe::LossSums<f32>, VpeParams<f32>)>> = indices
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let (x, t, labels) = assemble_batch(data, chunk, targets, canvas);
            let label_arg = if ce_weight > 0.0 {
                Some(labels.as_slice())
            } else {
                None
            };
            vpe_loss(
                params,
                x,
                &t,
                label_arg,
                kl_weight,
                ce_weight,
                eps_seed,
                ci * GRAD_CHUNK,
            )
        })
        .collect();

    let mut sums = crate::vpe::LossSums::<f32>::default();
    let mut grads = params.zeros_like();
    for res in chunk_results {
        let (chunk_sums, chunk_grads) = res?;
        sums.merge(&chunk_sums);
        grads.accumulate(&chunk_grads);
    }
    grads.scale(1.0 / indices.len() as f32);
    params.sgd_step(&grads, velocity, lr, momentum);
    Ok(sums)
}

/// Train encoder and decoder on (observation, class prototype) pairs, then
/// refresh the catalog centroids, fit the linear head on frozen latent
/// means, and bump the parameter version.
pub fn train_vpe(
    params: &mut VpeParams<f32>,
    catalog: &mut PrototypeCatalog,
    data: &[LabeledSample],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for sample in data {
        if catalog.entry(sample.label).is_err() {
            return Err(Error::Config(format!(
                "training label {} missing from catalog",
                sample.label
            )));
        }
    }
    let targets = target_table(catalog);
    let warmup_epochs = ((config.kl_warmup_frac * config.epochs as f64).round() as usize).max(1);
    let mut velocity = params.zeros_like();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let ramp = ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0);
        let kl_weight = (config.kl_weight * ramp) as f32;
        let eps_seed = rng::derive(config.seed, "noise", epoch as u64);

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::chacha(rng::derive(config.seed, "shuffle", epoch as u64)));

        let mut epoch_sums = crate::vpe::LossSums::<f32>::default();
        for batch in order.chunks(config.batch_size) {
            let sums = train_step(
                params,
                &mut velocity,
                data,
                batch,
                &targets,
                kl_weight,
                config.ce_weight as f32,
                eps_seed,
                config.learning_rate as f32,
                config.momentum as f32,
            )?;
            if !sums.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "batch loss became non-finite".into(),
                });
            }
            epoch_sums.merge(&sums);
        }
        log.push(EpochLog {
            epoch,
            loss_recon: f64::from(epoch_sums.mean_recon()),
            loss_kl: f64::from(epoch_sums.mean_kl()),
            loss_total: f64::from(epoch_sums.mean_total()),
        });
    }

    if !params.all_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            detail: "parameters non-finite after training".into(),
        });
    }

    params.version += 1;
    *catalog = compute_centroids(catalog, params)?;
    fit_head(params, data)?;
    Ok(log)
}

/// Fit the linear head by full-batch gradient descent on frozen latent
/// means. The problem is convex, so zero init plus a fixed schedule is
/// deterministic with no RNG involved.
pub fn fit_head(params: &mut VpeParams<f32>, data: &[LabeledSample]) -> Result<()> {
    const ITERS: usize = 400;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-5;

    let k = params.class_count();
    let d_z = params.d_z;
    let n = data.len();

    // Encode in slices to bound peak memory.
    let mut codes = Array2::<f64>::zeros((n, d_z));
    for (start, chunk) in data.chunks(256).enumerate().map(|(i, c)| (i * 256, c)) {
        let imgs: Vec<&crate::image::ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let mu = params.encode_batch(&imgs, EncodeMode::Mean)?;
        for (row, code) in mu.rows().into_iter().enumerate() {
            for j in 0..d_z {
                codes[[start + row, j]] = f64::from(code[j]);
            }
        }
    }

    let mut w = Array2::<f64>::zeros((k, d_z));
    let mut b = ndarray::Array1::<f64>::zeros(k);
    for _ in 0..ITERS {
        let mut logits = codes.dot(&w.t());
        for mut row in logits.rows_mut() {
            row += &b;
        }
        let mut delta = softmax_rows(&logits);
        for (i, sample) in data.iter().enumerate() {
            delta[[i, sample.label as usize]] -= 1.0;
        }
        let gw = delta.t().dot(&codes) / n as f64 + &(&w * L2);
        let gb = delta.sum_axis(Axis(0)) / n as f64;
        w = w - gw * LR;
        b = b - gb * LR;
    }

    params.head.weight = w.mapv(|v| v as f32);
    params.head.bias = b.mapv(|v| v as f32);
    Ok(())
}

//! Model refresh without forgetting, and the cycle that drives it.
//!
//! Retraining fine-tunes the deployed encoder on a mixed original + augmented
//! dataset while a consistency penalty anchors the head's predictions on
//! original samples to the frozen pre-refresh model:
//!
//!   (1/n) Σ_mixed [BCE + kl·KL + ce·CE]  +  λ·(1/n) Σ_orig KL(p_ref ‖ p_new)
//!
//! The anchor term is what keeps classes that never appear degraded from
//! drifting while the model absorbs the new appearance.
//!
//! `adaptation_cycle` wires the full loop: judge an incoming stream, buffer
//! flags, and once enough unknowns accumulate run augment → mix → retrain →
//! recalibrate. All of that happens on copies; the serving state (parameters,
//! catalog, thresholds, buffer) is swapped in one assignment block only after
//! every stage, including the new checkpoint, has succeeded. A failure at any
//! point leaves the previous model live and the buffer intact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis, NdFloat};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_degradation, DegradationKind, DegradationRecipe, LabeledSample,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{evaluate_model, MetricsReport};
use crate::monitor::{
    append_events, calibrate_thresholds, judge, BufferedUnknown, Thresholds, UnknownBuffer,
};
use crate::nn::ops::softmax_rows;
use crate::nn::ParamTensors;
use crate::rng;
use crate::style::{build_augmentation_set, mix_datasets, AugmentOptions, StyleTransferConfig};
use crate::vpe::checkpoint::{checkpoint_dir_name, dataset_fingerprint};
use crate::vpe::train::{assemble_batch, target_table, write_training_log, GRAD_CHUNK};
use crate::vpe::{
    batch_images, compute_centroids, save_checkpoint, vpe_loss, CheckpointMeta, EpochLog,
    LossSums, PrototypeCatalog, VpeParams,
};

/// Floor added inside both logs of the consistency KL so exact zeros in
/// either distribution stay finite.
pub const CONSISTENCY_EPS: f64 = 1e-9;

/// Synthetic-unknown cap for threshold calibration.
pub const RECALIBRATION_UNKNOWN_CAP: usize = 256;

/// Oracle-degraded copies of held-out images, the unknown side of threshold
/// calibration. The four degradation kinds cycle per sample with seeded
/// severities in [0.5, 0.9).
pub fn synthetic_unknowns(
    validation: &[LabeledSample],
    cap: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    validation
        .iter()
        .take(cap)
        .enumerate()
        .map(|(i, sample)| {
            let kind = DegradationKind::ALL[i % DegradationKind::ALL.len()];
            let severity = 0.5 + 0.4 * rng::hash_unit(seed, i as u64, 7);
            let recipe =
                DegradationRecipe::new(kind, severity, rng::derive(seed, "recalibrate", i as u64))?;
            apply_degradation(&sample.image, &recipe)
        })
        .collect()
}

/// Hyperparameters for one refresh run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RetrainConfig {
    /// Weight λ of the consistency anchor term.
    pub lambda_consist: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub kl_weight: f64,
    /// Weight of the classification term on the mixed dataset. Keeping this
    /// positive trains the head jointly, so no post-hoc head refit is needed
    /// (a refit would erase the anchoring the consistency term paid for).
    pub ce_weight: f64,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            lambda_consist: 1.0,
            epochs: 10,
            learning_rate: 3e-4,
            batch_size: 64,
            momentum: 0.9,
            kl_weight: 1e-3,
            ce_weight: 1.0,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_consist.is_finite() || self.lambda_consist < 0.0 {
            return Err(Error::Config(format!(
                "lambda_consist {} must be finite and nonnegative",
                self.lambda_consist
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("refresh needs at least one epoch".into()));
        }
        if !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
            || self.learning_rate > 1.0
        {
            return Err(Error::Config(format!(
                "learning_rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        for (name, value) in [("kl_weight", self.kl_weight), ("ce_weight", self.ce_weight)] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "{name} {value} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Σ over rows of KL(p ‖ q) = Σ p·(ln(p+ε) − ln(q+ε)). The ε floor keeps the
/// value finite when q carries exact zeros; the price is that the sum can dip
/// below zero by about ε per element instead of being exactly nonnegative.
pub fn consistency_kl<F: NdFloat>(p: &Array2<F>, q: &Array2<F>) -> F {
    debug_assert_eq!(p.dim(), q.dim());
    let eps = F::from(CONSISTENCY_EPS).unwrap();
    p.iter()
        .zip(q.iter())
        .map(|(&pv, &qv)| pv * ((pv + eps).ln() - (qv + eps).ln()))
        .fold(F::zero(), |a, b| a + b)
}

/// Mean consistency KL of `params` against the frozen `reference` over a
/// batch of original samples. Forward only; labels are ignored.
pub fn consistency_loss(
    params: &VpeParams<f32>,
    reference: &VpeParams<f32>,
    batch: &[LabeledSample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation(
            "consistency loss needs a non-empty batch".into(),
        ));
    }
    if params.canvas != reference.canvas || params.class_count() != reference.class_count() {
        return Err(Error::Contract(
            "consistency loss compares structurally different models".into(),
        ));
    }
    let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
    let x = batch_images::<f32>(&images, params.canvas)?;
    let p_enc = reference.encode_forward(x.clone());
    let q_enc = params.encode_forward(x);
    let p = softmax_rows(&reference.head.forward(&p_enc.mu)).mapv(f64::from);
    let q = softmax_rows(&params.head.forward(&q_enc.mu)).mapv(f64::from);
    Ok(consistency_kl(&p, &q) / batch.len() as f64)
}

/// Forward/backward of the summed consistency term on one anchor batch.
/// Returns the unweighted loss sum; gradients enter `grads` scaled by
/// `weight`. The reference model is a constant, so only the live encoder and
/// head receive gradients: with s = Σ_j p_j·q_j/(q_j+ε), the softmax chain of
/// −Σ p·ln(q+ε) gives dL/du_k = q_k·s − p_k·q_k/(q_k+ε).
fn consistency_forward_backward<F: NdFloat>(
    params: &VpeParams<F>,
    reference: &VpeParams<F>,
    images: Array4<F>,
    weight: F,
    grads: &mut VpeParams<F>,
) -> Result<F> {
    let eps = F::from(CONSISTENCY_EPS).unwrap();
    let ref_enc = reference.encode_forward(images.clone());
    let p = softmax_rows(&reference.head.forward(&ref_enc.mu));
    let enc = params.encode_forward(images);
    let q = softmax_rows(&params.head.forward(&enc.mu));

    let (n, k) = q.dim();
    let mut du = Array2::<F>::zeros((n, k));
    let mut loss = F::zero();
    for i in 0..n {
        let prow = p.row(i);
        let qrow = q.row(i);
        let mut s = F::zero();
        for j in 0..k {
            loss = loss + prow[j] * ((prow[j] + eps).ln() - (qrow[j] + eps).ln());
            s = s + prow[j] * qrow[j] / (qrow[j] + eps);
        }
        for j in 0..k {
            du[[i, j]] = weight * (qrow[j] * s - prow[j] * qrow[j] / (qrow[j] + eps));
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("consistency", "non-finite anchor KL"));
    }

    let (dmu, g_head) = params.head.backward(&enc.mu, &du);
    grads.head.accumulate(&g_head);
    let dlogvar = Array2::zeros(dmu.dim());
    params.encode_backward(&enc, &dmu, &dlogvar, grads);
    Ok(loss)
}

/// Summed refresh losses over one batch. `objective` is what the optimizer
/// descends: the base total plus λ times the consistency sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct RetrainLossSums<F> {
    pub vpe: LossSums<F>,
    pub consist: F,
    pub objective: F,
}

impl<F: NdFloat> RetrainLossSums<F> {
    pub fn merge(&mut self, other: &Self) {
        self.vpe.merge(&other.vpe);
        self.consist = self.consist + other.consist;
        self.objective = self.objective + other.objective;
    }
}

/// Full forward/backward of the summed refresh objective on paired batches:
/// the base objective on mixed samples plus λ times the consistency sum on
/// anchor images. Gradients of the whole expression come back in one
/// structure; callers divide by the batch size.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: NdFloat>(
    params: &VpeParams<F>,
    reference: &VpeParams<F>,
    mixed_images: Array4<F>,
    mixed_targets: &Array4<F>,
    mixed_labels: &[u32],
    anchor_images: &Array4<F>,
    lambda: F,
    kl_weight: F,
    ce_weight: F,
    seed: u64,
    sample_offset: usize,
) -> Result<(RetrainLossSums<F>, VpeParams<F>)> {
    let labels = (ce_weight > F::zero()).then_some(mixed_labels);
    let (vpe, mut grads) = vpe_loss(
        params,
        mixed_images,
        mixed_targets,
        labels,
        kl_weight,
        ce_weight,
        seed,
        sample_offset,
    )?;
    let mut consist = F::zero();
    if lambda > F::zero() && anchor_images.dim().0 > 0 {
        consist =
            consistency_forward_backward(params, reference, anchor_images.clone(), lambda, &mut grads)?;
    }
    let objective = vpe.total + lambda * consist;
    Ok((
        RetrainLossSums {
            vpe,
            consist,
            objective,
        },
        grads,
    ))
}

fn assemble_images(data: &[LabeledSample], indices: &[usize], canvas: usize) -> Array4<f32> {
    let mut x = Array4::zeros((indices.len(), 3, canvas, canvas));
    for (row, &idx) in indices.iter().enumerate() {
        x.index_axis_mut(Axis(0), row).assign(data[idx].image.data());
    }
    x
}

/// One refresh step: chunked parallel forward/backward over paired mixed and
/// anchor sub-batches, ordered merge, mean-scaled SGD update.
#[allow(clippy::too_many_arguments)]
fn retrain_step(
    params: &mut VpeParams<f32>,
    velocity: &mut VpeParams<f32>,
    reference: &VpeParams<f32>,
    mixed: &[LabeledSample],
    batch: &[usize],
    originals: &[LabeledSample],
    anchors: Option<&[usize]>,
    targets: &BTreeMap<u32, Array3<f32>>,
    config: &RetrainConfig,
    eps_seed: u64,
) -> Result<RetrainLossSums<f32>> {
    let canvas = params.canvas;
    let lambda = config.lambda_consist as f32;
    let chunk_results: Vec<Result<(RetrainLossSums<f32>, VpeParams<f32>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let (x, t, labels) = assemble_batch(mixed, chunk, targets, canvas);
            let anchor_x = match anchors {
                Some(idx) => {
                    let lo = ci * GRAD_CHUNK;
                    assemble_images(originals, &idx[lo..lo + chunk.len()], canvas)
                }
                None => Array4::zeros((0, 3, canvas, canvas)),
            };
            total_loss(
                params,
                reference,
                x,
                &t,
                &labels,
                &anchor_x,
                lambda,
                config.kl_weight as f32,
                config.ce_weight as f32,
                eps_seed,
                ci * GRAD_CHUNK,
            )
        })
        .collect();

    let mut sums = RetrainLossSums::<f32>::default();
    let mut grads = params.zeros_like();
    for res in chunk_results {
        let (chunk_sums, chunk_grads) = res?;
        sums.merge(&chunk_sums);
        grads.accumulate(&chunk_grads);
    }
    grads.scale(1.0 / batch.len() as f32);
    params.sgd_step(
        &grads,
        velocity,
        config.learning_rate as f32,
        config.momentum as f32,
    );
    Ok(sums)
}

/// Result of one refresh: the new model, its recomputed catalog, and the
/// per-epoch loss trace.
#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub params: VpeParams<f32>,
    pub catalog: PrototypeCatalog,
    pub log: Vec<EpochLog>,
}

/// Fine-tune `start` on the mixed dataset with consistency anchoring against
/// the original samples. Never trains from scratch: the refreshed model
/// starts from the deployed weights, gets its version bumped, and has its
/// centroids recomputed. On any error the caller's model is untouched.
pub fn retrain(
    start: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
    mixed: &[LabeledSample],
    originals: &[LabeledSample],
    config: &RetrainConfig,
) -> Result<RetrainOutcome> {
    config.validate()?;
    if mixed.is_empty() {
        return Err(Error::Validation(
            "refresh needs a non-empty mixed dataset".into(),
        ));
    }
    if config.lambda_consist > 0.0 && originals.is_empty() {
        return Err(Error::Validation(
            "consistency anchoring needs original samples (or lambda_consist = 0)".into(),
        ));
    }
    if catalog.version != start.version {
        return Err(Error::Contract(format!(
            "catalog centroids from encoder version {} used with version {}",
            catalog.version, start.version
        )));
    }
    for sample in mixed {
        if catalog.entry(sample.label).is_err() {
            return Err(Error::Config(format!(
                "mixed-dataset label {} missing from catalog",
                sample.label
            )));
        }
    }

    let targets = target_table(catalog);
    let mut params = start.clone();
    let reference = start.clone();
    let mut velocity = params.zeros_like();
    let use_anchor = config.lambda_consist > 0.0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let eps_seed = rng::derive(config.seed, "retrain-noise", epoch as u64);
        let mut order: Vec<usize> = (0..mixed.len()).collect();
        order.shuffle(&mut rng::chacha(rng::derive(
            config.seed,
            "retrain-shuffle",
            epoch as u64,
        )));
        let mut anchor_rng = rng::chacha(rng::derive(
            config.seed,
            "retrain-anchor",
            epoch as u64,
        ));

        let mut epoch_sums = RetrainLossSums::<f32>::default();
        for batch in order.chunks(config.batch_size) {
            // Each mixed batch is paired with an equally sized draw of
            // anchor originals, so both terms average over the same count.
            let anchors: Option<Vec<usize>> = use_anchor.then(|| {
                (0..batch.len())
                    .map(|_| anchor_rng.random_range(0..originals.len()))
                    .collect()
            });
            let sums = retrain_step(
                &mut params,
                &mut velocity,
                &reference,
                mixed,
                batch,
                originals,
                anchors.as_deref(),
                &targets,
                config,
                eps_seed,
            )?;
            if !sums.objective.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "refresh objective became non-finite".into(),
                });
            }
            epoch_sums.merge(&sums);
        }
        log.push(EpochLog {
            epoch,
            loss_recon: f64::from(epoch_sums.vpe.mean_recon()),
            loss_kl: f64::from(epoch_sums.vpe.mean_kl()),
            loss_total: f64::from(epoch_sums.objective) / epoch_sums.vpe.count.max(1) as f64,
        });
    }

    if !params.all_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            detail: "parameters non-finite after refresh".into(),
        });
    }

    params.version += 1;
    let catalog = compute_centroids(catalog, &params)?;
    Ok(RetrainOutcome {
        params,
        catalog,
        log,
    })
}

/// Everything the monitor-and-refresh loop serves from. Swapped as a unit by
/// `adaptation_cycle`.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub params: VpeParams<f32>,
    pub catalog: PrototypeCatalog,
    pub thresholds: Thresholds,
    pub buffer: UnknownBuffer,
    /// The original training split; anchor source and mixing pool.
    pub originals: Vec<LabeledSample>,
    /// Held-out clean split used to recalibrate thresholds after a refresh.
    pub validation: Vec<LabeledSample>,
}

/// Knobs for one adaptation cycle.
#[derive(Clone, Debug)]
pub struct CycleConfig {
    /// Minimum number of buffered unknowns before a refresh fires.
    pub trigger_min: usize,
    /// Fraction of originals in the mixed dataset.
    pub mix_ratio: f64,
    /// Mixed-dataset size; defaults to the original split's size.
    pub mix_target: Option<usize>,
    pub augment: AugmentOptions,
    pub style: StyleTransferConfig,
    pub retrain: RetrainConfig,
    pub seed: u64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            trigger_min: 16,
            mix_ratio: 0.5,
            mix_target: None,
            augment: AugmentOptions::default(),
            style: StyleTransferConfig::default(),
            retrain: RetrainConfig::default(),
            seed: 0,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trigger_min == 0 {
            return Err(Error::Config("trigger_min must be positive".into()));
        }
        if !self.mix_ratio.is_finite() || !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!(
                "mix_ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        self.style.validate()?;
        self.retrain.validate()
    }
}

/// Macro scores of one evaluation, flattened for the cycle report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl From<&MetricsReport> for MetricsSnapshot {
    fn from(report: &MetricsReport) -> Self {
        Self {
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            accuracy: report.accuracy,
        }
    }
}

/// What one adaptation cycle did. Checkpoint fields name directories under
/// the run directory and always exist on disk by the time the report is
/// returned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub fired: bool,
    /// Flags raised by this cycle's stream (the buffer may also hold
    /// unknowns carried over from earlier cycles).
    pub flagged_count: usize,
    pub buffered_count: usize,
    /// Number of augmented samples synthesized for the mixed dataset.
    pub n_prime: usize,
    pub pre_clean: MetricsSnapshot,
    pub pre_degraded: MetricsSnapshot,
    pub post_clean: Option<MetricsSnapshot>,
    pub post_degraded: Option<MetricsSnapshot>,
    pub wall_time_seconds: f64,
    pub checkpoint_before: String,
    pub checkpoint_after: Option<String>,
}

impl AdaptationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("adaptation report serialization: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Judge a stream of incoming observations and, once the buffer holds at
/// least `trigger_min` unknowns, run the full refresh: augment, mix, retrain,
/// recalibrate thresholds, checkpoint, and atomically swap the serving state.
///
/// The swap happens only after every stage has succeeded; any error leaves
/// `state` exactly as it was (apart from newly buffered flags, which persist
/// by design so the evidence is not lost).
pub fn adaptation_cycle(
    state: &mut PipelineState,
    incoming: &[ImageTensor],
    eval_clean: &[LabeledSample],
    eval_degraded: &[LabeledSample],
    config: &CycleConfig,
    run_dir: &Path,
) -> Result<AdaptationReport> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let pre_clean = MetricsSnapshot::from(&evaluate_model(&state.params, &state.catalog, eval_clean)?);
    let pre_degraded =
        MetricsSnapshot::from(&evaluate_model(&state.params, &state.catalog, eval_degraded)?);

    // Pin the serving model to disk before anything else, so every report
    // references a checkpoint that exists.
    let before_name = checkpoint_dir_name(state.params.version);
    let before_dir = run_dir.join(&before_name);
    if !before_dir.exists() {
        let meta = CheckpointMeta {
            version: state.params.version,
            parent_version: None,
            d_z: state.params.d_z,
            canvas: state.params.canvas,
            channels: state.params.channels(),
            class_count: state.params.class_count(),
            seed: config.seed,
            data_fingerprint: dataset_fingerprint(&state.originals),
        };
        save_checkpoint(&before_dir, &state.params, &meta)?;
    }

    let mut events = Vec::new();
    for image in incoming {
        let verdict = judge(image, &state.params, &state.catalog, &state.thresholds)?;
        if verdict.flagged {
            events.push(state.buffer.push(image.clone(), verdict)?);
        }
    }
    append_events(&run_dir.join("events.jsonl"), &events)?;
    let flagged_count = events.len();
    let buffered_count = state.buffer.len();

    if buffered_count < config.trigger_min {
        return Ok(AdaptationReport {
            fired: false,
            flagged_count,
            buffered_count,
            n_prime: 0,
            pre_clean,
            pre_degraded,
            post_clean: None,
            post_degraded: None,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            checkpoint_before: before_name,
            checkpoint_after: None,
        });
    }

    // Refresh pipeline. Works on copies throughout; `state` is written only
    // in the swap block at the end.
    let entries: Vec<BufferedUnknown> = state.buffer.iter().cloned().collect();
    let augmented = build_augmentation_set(
        &entries,
        &state.catalog,
        &state.originals,
        &config.augment,
        &config.style,
    )?;
    let n_prime = augmented.len();
    let target = config.mix_target.unwrap_or(state.originals.len());
    let mixed = mix_datasets(
        &state.originals,
        &augmented.samples,
        config.mix_ratio,
        target,
        rng::derive(config.seed, "cycle-mix", state.params.version),
    )?;

    let outcome = retrain(
        &state.params,
        &state.catalog,
        &mixed.samples,
        &state.originals,
        &config.retrain,
    )?;

    // Recalibrate thresholds in the refreshed embedding: clean side from the
    // held-out validation split, unknown side from oracle degradations of it.
    let synthetic = synthetic_unknowns(&state.validation, RECALIBRATION_UNKNOWN_CAP, config.seed)?;
    let calibration =
        calibrate_thresholds(&state.validation, &synthetic, &outcome.params, &outcome.catalog)?;

    let post_clean =
        MetricsSnapshot::from(&evaluate_model(&outcome.params, &outcome.catalog, eval_clean)?);
    let post_degraded =
        MetricsSnapshot::from(&evaluate_model(&outcome.params, &outcome.catalog, eval_degraded)?);

    // Stage the new checkpoint beside its final name, then rename, so a
    // half-written directory can never be mistaken for a checkpoint.
    let after_name = checkpoint_dir_name(outcome.params.version);
    let after_meta = CheckpointMeta {
        version: outcome.params.version,
        parent_version: Some(state.params.version),
        d_z: outcome.params.d_z,
        canvas: outcome.params.canvas,
        channels: outcome.params.channels(),
        class_count: outcome.params.class_count(),
        seed: config.retrain.seed,
        data_fingerprint: dataset_fingerprint(&mixed.samples),
    };
    let staging = run_dir.join(format!("{after_name}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    save_checkpoint(&staging, &outcome.params, &after_meta)?;
    let after_dir = run_dir.join(&after_name);
    if after_dir.exists() {
        fs::remove_dir_all(&after_dir).map_err(|e| Error::io(&after_dir, e))?;
    }
    fs::rename(&staging, &after_dir).map_err(|e| Error::io(&after_dir, e))?;
    write_training_log(
        &run_dir.join(format!("retrain_{}.csv", outcome.params.version)),
        &outcome.log,
    )?;

    // Atomic swap: model, catalog, and thresholds change together, and only
    // now are the buffered unknowns that drove this refresh released.
    state.params = outcome.params;
    state.catalog = outcome.catalog;
    state.thresholds = calibration.thresholds;
    state.buffer.drain();

    Ok(AdaptationReport {
        fired: true,
        flagged_count,
        buffered_count,
        n_prime,
        pre_clean,
        pre_degraded,
        post_clean: Some(post_clean),
        post_degraded: Some(post_degraded),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        checkpoint_before: before_name,
        checkpoint_after: Some(after_name),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_catalog, synthesize_dataset, JitterConfig, Origin, SignClassSpec};
    use crate::monitor::read_events;
    use crate::vpe::checkpoint::load_checkpoint;
    use crate::vpe::{train_vpe, TrainConfig};
    use ndarray::arr2;
    use std::sync::OnceLock;

    #[test]
    fn consistency_kl_matches_the_closed_form() {
        let p = arr2(&[[0.9f64, 0.1]]);
        let q = arr2(&[[0.5f64, 0.5]]);
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((consistency_kl(&p, &q) - expected).abs() < 1e-6);
    }

    #[test]
    fn consistency_kl_of_identical_rows_is_exactly_zero() {
        let p = arr2(&[[0.2f64, 0.3, 0.5], [1.0, 0.0, 0.0]]);
        assert_eq!(consistency_kl(&p, &p.clone()), 0.0);
    }

    #[test]
    fn consistency_kl_is_nonnegative_up_to_the_floor() {
        let mut r = crate::rng::chacha(77);
        for _ in 0..500 {
            let k = r.random_range(2..9usize);
            let logits_p = Array2::from_shape_fn((3, k), |_| r.random_range(-6.0..6.0));
            let logits_q = Array2::from_shape_fn((3, k), |_| r.random_range(-6.0..6.0));
            let p = softmax_rows(&logits_p);
            let q = softmax_rows(&logits_q);
            let kl = consistency_kl(&p, &q);
            assert!(kl >= -1e-9, "KL {kl} fell below the floor tolerance");
        }
    }

    fn tiny_f64(seed: u64) -> VpeParams<f64> {
        VpeParams::new(8, 4, [2, 3, 4], 3, seed).unwrap()
    }

    fn rand_batch(seed: u64, n: usize, canvas: usize) -> Array4<f64> {
        let mut r = crate::rng::chacha(seed);
        Array4::from_shape_fn((n, 3, canvas, canvas), |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn lambda_zero_reduces_to_the_base_objective() {
        let params = tiny_f64(3);
        let reference = tiny_f64(4);
        let x = rand_batch(5, 2, 8);
        let t = rand_batch(6, 2, 8);
        let anchor = rand_batch(7, 2, 8);
        let labels = [0u32, 2];
        let (sums, grads) = total_loss(
            &params, &reference, x.clone(), &t, &labels, &anchor, 0.0, 1e-2, 1.0, 13, 0,
        )
        .unwrap();
        let (base, base_grads) =
            vpe_loss(&params, x, &t, Some(&labels), 1e-2, 1.0, 13, 0).unwrap();
        assert_eq!(sums.objective, base.total);
        assert_eq!(sums.consist, 0.0);
        assert_eq!(grads, base_grads);
    }

    /// Central finite differences over the combined objective, consistency
    /// term included. This is the oracle for the anchor-term backward pass.
    #[test]
    fn refresh_gradients_match_finite_differences() {
        let params = tiny_f64(5);
        let reference = tiny_f64(9);
        let x = rand_batch(15, 2, 8);
        let t = rand_batch(16, 2, 8);
        let anchor = rand_batch(17, 2, 8);
        let labels = [1u32, 2];
        let eval = |p: &VpeParams<f64>| -> f64 {
            let (sums, _) = total_loss(
                p, &reference, x.clone(), &t, &labels, &anchor, 0.7, 1e-2, 1.0, 21, 0,
            )
            .unwrap();
            sums.objective
        };
        let (_, grads) = total_loss(
            &params, &reference, x.clone(), &t, &labels, &anchor, 0.7, 1e-2, 1.0, 21, 0,
        )
        .unwrap();

        let total_params = grads.param_count();
        let probes: Vec<usize> = (0..30).map(|j| j * total_params / 30 + j % 5).collect();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for &idx in &probes {
            let mut pp = params.clone();
            nudge(&mut pp, idx, eps);
            let mut pm = params.clone();
            nudge(&mut pm, idx, -eps);
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * eps);
            let an = read_flat(&grads, idx);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-3,
                "gradient mismatch at flat index {idx}: fd={fd:.6e} analytic={an:.6e} rel={rel:.2e}"
            );
        }
        assert!(worst < 1e-5, "worst relative error suspiciously high: {worst:.2e}");
    }

    fn nudge(p: &mut VpeParams<f64>, flat_idx: usize, delta: f64) {
        let mut base = 0;
        p.visit_mut(&mut |slice| {
            if flat_idx >= base && flat_idx < base + slice.len() {
                slice[flat_idx - base] += delta;
            }
            base += slice.len();
        });
    }

    fn read_flat(p: &VpeParams<f64>, flat_idx: usize) -> f64 {
        let mut base = 0;
        let mut out = f64::NAN;
        p.visit(&mut |slice| {
            if flat_idx >= base && flat_idx < base + slice.len() {
                out = slice[flat_idx - base];
            }
            base += slice.len();
        });
        out
    }

    #[test]
    fn bad_refresh_configs_are_rejected() {
        let base = RetrainConfig::default();
        base.validate().unwrap();
        for broken in [
            RetrainConfig { lambda_consist: -0.5, ..base },
            RetrainConfig { epochs: 0, ..base },
            RetrainConfig { learning_rate: 0.0, ..base },
            RetrainConfig { learning_rate: 1.5, ..base },
            RetrainConfig { batch_size: 0, ..base },
            RetrainConfig { momentum: 1.0, ..base },
            RetrainConfig { ce_weight: f64::NAN, ..base },
        ] {
            assert_eq!(broken.validate().unwrap_err().exit_code(), 2);
        }
    }

    struct Fixture {
        specs: Vec<SignClassSpec>,
        params: VpeParams<f32>,
        catalog: PrototypeCatalog,
        train: Vec<LabeledSample>,
        validation: Vec<LabeledSample>,
        eval_clean: Vec<LabeledSample>,
        eval_degraded: Vec<LabeledSample>,
    }

    fn degrade_set(set: &[LabeledSample], severity: f64, seed: u64) -> Vec<LabeledSample> {
        set.iter()
            .enumerate()
            .map(|(i, s)| {
                let recipe = DegradationRecipe::new(
                    DegradationKind::Rust,
                    severity,
                    crate::rng::derive(seed, "degrade", i as u64),
                )
                .unwrap();
                LabeledSample {
                    image: apply_degradation(&s.image, &recipe).unwrap(),
                    label: s.label,
                    origin: Origin::UnknownCapture,
                    provenance_seed: recipe.seed,
                }
            })
            .collect()
    }

    /// One well-trained two-class toy model shared across the tests below.
    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let specs = default_catalog(2).unwrap();
            let jitter = JitterConfig::default();
            let train = synthesize_dataset(&specs, 16, 10, &jitter, 31).unwrap();
            let validation = synthesize_dataset(&specs, 16, 5, &jitter, 32).unwrap();
            let eval_clean = synthesize_dataset(&specs, 16, 25, &jitter, 33).unwrap();
            let eval_degraded = degrade_set(&eval_clean, 0.8, 34);
            let mut params = VpeParams::new(16, 4, [6, 8, 10], 2, 7).unwrap();
            let mut catalog = PrototypeCatalog::render(&specs, 16, 4).unwrap();
            let config = TrainConfig {
                epochs: 24,
                batch_size: 10,
                seed: 7,
                ..TrainConfig::default()
            };
            train_vpe(&mut params, &mut catalog, &train, &config).unwrap();
            Fixture {
                specs,
                params,
                catalog,
                train,
                validation,
                eval_clean,
                eval_degraded,
            }
        })
    }

    #[test]
    fn identical_models_incur_zero_consistency_loss() {
        let f = fixture();
        let loss = consistency_loss(&f.params, &f.params, &f.train).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn refresh_is_deterministic_and_bumps_the_version() {
        let f = fixture();
        let config = RetrainConfig {
            epochs: 2,
            batch_size: 10,
            seed: 11,
            ..RetrainConfig::default()
        };
        let a = retrain(&f.params, &f.catalog, &f.train, &f.train, &config).unwrap();
        let b = retrain(&f.params, &f.catalog, &f.train, &f.train, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), b.log.len());
        for (la, lb) in a.log.iter().zip(&b.log) {
            assert_eq!(la.loss_total.to_bits(), lb.loss_total.to_bits());
        }
        assert_eq!(a.params.version, f.params.version + 1);
        assert_eq!(a.catalog.version, a.params.version);
        assert_ne!(a.params, f.params);
    }

    #[test]
    fn one_epoch_refresh_on_a_converged_model_is_stable() {
        let f = fixture();
        let pre = evaluate_model(&f.params, &f.catalog, &f.eval_clean).unwrap();
        let config = RetrainConfig::default();
        let out = retrain(
            &f.params,
            &f.catalog,
            &f.train,
            &f.train,
            &RetrainConfig {
                epochs: 1,
                batch_size: 10,
                ..config
            },
        )
        .unwrap();
        let post = evaluate_model(&out.params, &out.catalog, &f.eval_clean).unwrap();
        assert!(
            (post.accuracy - pre.accuracy).abs() <= 0.02 + 1e-12,
            "accuracy moved {} -> {} on a converged model",
            pre.accuracy,
            post.accuracy
        );
    }

    #[test]
    fn refresh_rejects_bad_inputs() {
        let f = fixture();
        let config = RetrainConfig::default();
        assert_eq!(
            retrain(&f.params, &f.catalog, &[], &f.train, &config)
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(
            retrain(&f.params, &f.catalog, &f.train, &[], &config)
                .unwrap_err()
                .exit_code(),
            2
        );
        // lambda 0 lifts the anchor requirement.
        retrain(
            &f.params,
            &f.catalog,
            &f.train,
            &[],
            &RetrainConfig {
                lambda_consist: 0.0,
                epochs: 1,
                batch_size: 10,
                ..config
            },
        )
        .unwrap();
        let mut alien = f.train[0].clone();
        alien.label = 99;
        assert_eq!(
            retrain(&f.params, &f.catalog, &[alien], &f.train, &config)
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    fn live_state(thresholds: Thresholds) -> PipelineState {
        let f = fixture();
        PipelineState {
            params: f.params.clone(),
            catalog: f.catalog.clone(),
            thresholds,
            buffer: UnknownBuffer::new(64).unwrap(),
            originals: f.train.clone(),
            validation: f.validation.clone(),
        }
    }

    fn quick_cycle_config() -> CycleConfig {
        CycleConfig {
            trigger_min: 2,
            mix_ratio: 0.5,
            mix_target: Some(16),
            augment: AugmentOptions {
                seeds_per_entry: 1,
                draws_per_seed: 1,
            },
            style: StyleTransferConfig {
                iterations: 4,
                ..StyleTransferConfig::default()
            },
            retrain: RetrainConfig {
                epochs: 1,
                batch_size: 16,
                ..RetrainConfig::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn clean_stream_below_trigger_is_a_noop() {
        let f = fixture();
        // Vacuous thresholds: nothing flags.
        let mut state = live_state(Thresholds {
            tau_d: 1e6,
            tau_y: 1e-3,
        });
        let before = state.params.clone();
        let dir = tempfile::tempdir().unwrap();
        let incoming: Vec<ImageTensor> =
            f.eval_clean.iter().take(4).map(|s| s.image.clone()).collect();
        let report = adaptation_cycle(
            &mut state,
            &incoming,
            &f.eval_clean,
            &f.eval_degraded,
            &quick_cycle_config(),
            dir.path(),
        )
        .unwrap();
        assert!(!report.fired);
        assert_eq!(report.flagged_count, 0);
        assert_eq!(report.n_prime, 0);
        assert!(report.post_clean.is_none() && report.checkpoint_after.is_none());
        assert_eq!(state.params, before);
        assert!(dir.path().join(&report.checkpoint_before).is_dir());
    }

    #[test]
    fn degraded_stream_fires_a_cycle_and_swaps_the_state() {
        let f = fixture();
        // Tight distance threshold: everything in the stream flags.
        let mut state = live_state(Thresholds {
            tau_d: 1e-6,
            tau_y: 0.5,
        });
        let v0 = state.params.version;
        let dir = tempfile::tempdir().unwrap();
        let incoming: Vec<ImageTensor> = degrade_set(&f.eval_clean[..3], 0.9, 81)
            .into_iter()
            .map(|s| s.image)
            .collect();
        let config = quick_cycle_config();
        let report = adaptation_cycle(
            &mut state,
            &incoming,
            &f.eval_clean,
            &f.eval_degraded,
            &config,
            dir.path(),
        )
        .unwrap();

        assert!(report.fired);
        assert_eq!(report.flagged_count, 3);
        assert_eq!(report.buffered_count, 3);
        // 3 unknowns x 1 seed x (1 prototype + 1 draw).
        assert_eq!(report.n_prime, 6);
        assert!(report.post_clean.is_some() && report.post_degraded.is_some());

        // The swap really happened.
        assert_eq!(state.params.version, v0 + 1);
        assert_eq!(state.catalog.version, state.params.version);
        assert!(state.buffer.is_empty());
        state.thresholds.validate().unwrap();

        // Checkpoint lineage on disk: before and after exist, after points
        // back at before.
        let before_dir = dir.path().join(&report.checkpoint_before);
        let after_dir = dir.path().join(report.checkpoint_after.as_ref().unwrap());
        assert!(before_dir.is_dir() && after_dir.is_dir());
        let (after_params, after_meta) = load_checkpoint(&after_dir).unwrap();
        assert_eq!(after_params, state.params);
        assert_eq!(after_meta.parent_version, Some(v0));

        // Every incoming observation left an event line.
        let events = read_events(&dir.path().join("events.jsonl")).unwrap();
        assert_eq!(events.len(), 3);
        assert!(dir.path().join(format!("retrain_{}.csv", v0 + 1)).is_file());

        // The report round-trips through JSON.
        let report_path = dir.path().join("adaptation.json");
        report.save(&report_path).unwrap();
        assert_eq!(AdaptationReport::load(&report_path).unwrap(), report);
    }

    #[test]
    fn failed_cycle_leaves_the_serving_state_untouched() {
        let f = fixture();
        let mut state = live_state(Thresholds {
            tau_d: 1e-6,
            tau_y: 0.5,
        });
        // Empty validation split: recalibration fails after retraining has
        // already produced a candidate model.
        state.validation.clear();
        let params_before = state.params.clone();
        let thresholds_before = state.thresholds;
        let dir = tempfile::tempdir().unwrap();
        let incoming: Vec<ImageTensor> = degrade_set(&f.eval_clean[..3], 0.9, 82)
            .into_iter()
            .map(|s| s.image)
            .collect();
        let err = adaptation_cycle(
            &mut state,
            &incoming,
            &f.eval_clean,
            &f.eval_degraded,
            &quick_cycle_config(),
            dir.path(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);

        assert_eq!(state.params, params_before);
        assert_eq!(state.thresholds, thresholds_before);
        // The flags stay buffered; no post-refresh checkpoint appeared.
        assert_eq!(state.buffer.len(), 3);
        assert!(!dir
            .path()
            .join(checkpoint_dir_name(params_before.version + 1))
            .is_dir());
        // Run a sanity pass over the fixture specs to keep them exercised.
        assert_eq!(f.specs.len(), 2);
    }
}

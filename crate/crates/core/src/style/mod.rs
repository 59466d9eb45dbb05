//! Degradation-style transfer: renders clean content images in the texture
//! of a buffered unknown, producing labeled synthetic training data.
//!
//! Style is summarized by Gram matrices of a fixed, seeded, random-weight
//! conv stack; no pretrained network is involved. A candidate image starts
//! as the content image plus seeded noise and descends the weighted sum of a
//! pixel-space content term and the Gram style term, projected onto [0,1]
//! after every step.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView3};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, Origin};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::monitor::BufferedUnknown;
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::ops::{tanh_backward, tanh_forward};
use crate::rng;
use crate::vpe::{batch_images, PrototypeCatalog};

/// Optimization settings for one style transfer. `noise_seed` is the
/// randomness knob: different seeds give different draws of the same
/// (unknown, content) pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StyleTransferConfig {
    pub content_weight: f64,
    pub style_weight: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub feature_extractor_seed: u64,
    pub noise_seed: u64,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        Self {
            content_weight: 1.0,
            style_weight: 10.0,
            iterations: 100,
            step_size: 0.05,
            feature_extractor_seed: 0,
            noise_seed: 0,
        }
    }
}

impl StyleTransferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("content_weight", self.content_weight),
            ("style_weight", self.style_weight),
            ("step_size", self.step_size),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} {v} must be finite and non-negative"
                )));
            }
        }
        if self.step_size <= 0.0 {
            return Err(Error::Validation("step_size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frozen random-weight conv stack (3 -> 8 -> 8 -> 8, stride 1, tanh) whose
/// per-layer Gram matrices define the style statistic.
pub struct FeatureExtractor {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    conv3: Conv2d<f32>,
}

struct FeatureCaches {
    a1: Array4<f32>,
    a2: Array4<f32>,
    a3: Array4<f32>,
    c1: ConvCache<f32>,
    c2: ConvCache<f32>,
    c3: ConvCache<f32>,
}

/// Channel Gram matrix of one activation map, normalized by C·H·W.
pub fn gram_matrix(activation: ArrayView3<'_, f32>) -> Array2<f32> {
    let (c, h, w) = activation.dim();
    let a = activation
        .to_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous activation");
    let m = (c * h * w) as f32;
    let mut g = a.dot(&a.t());
    g.mapv_inplace(|v| v / m);
    g
}

/// Squared Frobenius distance between two Gram matrices, in f64.
pub fn gram_distance(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::chacha(rng::derive(seed, "style-extractor", 0));
        Self {
            conv1: Conv2d::new(3, 8, 3, 1, 1, &mut r),
            conv2: Conv2d::new(8, 8, 3, 1, 1, &mut r),
            conv3: Conv2d::new(8, 8, 3, 1, 1, &mut r),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> FeatureCaches {
        let (y1, c1) = self.conv1.forward(x);
        let a1 = tanh_forward(&y1);
        let (y2, c2) = self.conv2.forward(&a1);
        let a2 = tanh_forward(&y2);
        let (y3, c3) = self.conv3.forward(&a2);
        let a3 = tanh_forward(&y3);
        FeatureCaches {
            a1,
            a2,
            a3,
            c1,
            c2,
            c3,
        }
    }

    /// Layer Gram matrices of one image batch (n = 1).
    pub fn grams(&self, x: &Array4<f32>) -> [Array2<f32>; 3] {
        let caches = self.forward(x);
        [
            gram_matrix(caches.a1.index_axis(ndarray::Axis(0), 0)),
            gram_matrix(caches.a2.index_axis(ndarray::Axis(0), 0)),
            gram_matrix(caches.a3.index_axis(ndarray::Axis(0), 0)),
        ]
    }

    /// Style loss against precomputed target Grams plus its gradient at the
    /// input pixels.
    fn style_loss_and_grad(
        &self,
        x: &Array4<f32>,
        targets: &[Array2<f32>; 3],
    ) -> (f64, Array4<f32>) {
        let caches = self.forward(x);
        let (l3, dg3) = gram_backprop(&caches.a3, &targets[2]);
        let dy3 = tanh_backward(&dg3, &caches.a3);
        let (mut da2, _) = self.conv3.backward(&dy3, &caches.c3);
        let (l2, dg2) = gram_backprop(&caches.a2, &targets[1]);
        da2 += &dg2;
        let dy2 = tanh_backward(&da2, &caches.a2);
        let (mut da1, _) = self.conv2.backward(&dy2, &caches.c2);
        let (l1, dg1) = gram_backprop(&caches.a1, &targets[0]);
        da1 += &dg1;
        let dy1 = tanh_backward(&da1, &caches.a1);
        let (dx, _) = self.conv1.backward(&dy1, &caches.c1);
        (l1 + l2 + l3, dx)
    }
}

/// Per-layer style term: the squared Frobenius distance between the (size-
/// normalized) Grams, weighted back up by the layer's activation count. The
/// weighting makes the style gradient at a pixel the same order of magnitude
/// as the pixel-space content gradient regardless of image size; without it
/// the double size-normalization shrinks the style force by a factor of the
/// activation count and the content term always wins.
fn gram_backprop(activation: &Array4<f32>, target: &Array2<f32>) -> (f64, Array4<f32>) {
    let (n, c, h, w) = activation.dim();
    debug_assert_eq!(n, 1);
    let a = activation
        .view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous activation");
    let m = (c * h * w) as f32;
    let mut g = a.dot(&a.t());
    g.mapv_inplace(|v| v / m);
    let diff = &g - target;
    let loss: f64 =
        f64::from(m) * diff.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
    let mut da = diff.dot(&a);
    da.mapv_inplace(|v| 4.0 * v);
    (
        loss,
        da.into_shape_with_order((n, c, h, w)).expect("same size"),
    )
}

/// Total style loss between two images under a given extractor: each layer
/// contributes its Gram distance weighted by its activation count, matching
/// the optimization objective.
pub fn gram_style_loss(
    candidate: &ImageTensor,
    style_exemplar: &ImageTensor,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    if candidate.size() != style_exemplar.size() {
        return Err(Error::Shape(format!(
            "candidate size {} does not match exemplar size {}",
            candidate.size(),
            style_exemplar.size()
        )));
    }
    let xc = batch_images::<f32>(&[candidate], candidate.size())?;
    let xe = batch_images::<f32>(&[style_exemplar], style_exemplar.size())?;
    let gc = extractor.grams(&xc);
    let ge = extractor.grams(&xe);
    let n = candidate.size();
    // The three stride-1 layers share the input's spatial extent.
    let m = (8 * n * n) as f64;
    Ok(gc
        .iter()
        .zip(ge.iter())
        .map(|(a, b)| m * gram_distance(a, b))
        .sum())
}

fn optimize(
    target_grams: &[Array2<f32>; 3],
    prototype: &ImageTensor,
    extractor: &FeatureExtractor,
    config: &StyleTransferConfig,
    step_size: f64,
) -> Result<ImageTensor> {
    let size = prototype.size();
    // Noise amplitude derived from the randomness seed keeps draws distinct
    // without swamping the content.
    let amp = (0.02 + 0.08 * rng::hash_unit(config.noise_seed, 0, 0)) as f32;
    let mut r = rng::chacha(rng::derive(config.noise_seed, "style-noise", 0));
    let mut candidate = prototype.clone();
    for v in candidate.data_mut().iter_mut() {
        *v = (*v + r.random_range(-amp..amp)).clamp(0.0, 1.0);
    }
    let proto = batch_images::<f32>(&[prototype], size)?;
    let cw = config.content_weight as f32;
    let sw = config.style_weight as f32;
    let step = step_size as f32;
    for iter in 0..config.iterations {
        let x = batch_images::<f32>(&[&candidate], size)?;
        let (style_loss, style_grad) = extractor.style_loss_and_grad(&x, target_grams);
        let content_diff = &x - &proto;
        let content_loss: f64 = content_diff
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum();
        let total = config.content_weight * content_loss + config.style_weight * style_loss;
        if !total.is_finite() {
            return Err(Error::numerical(
                "style transfer",
                format!("objective became non-finite at iteration {iter}"),
            ));
        }
        let data = candidate.data_mut();
        for c in 0..3 {
            for y in 0..size {
                for xx in 0..size {
                    let g = sw * style_grad[[0, c, y, xx]] + cw * 2.0 * content_diff[[0, c, y, xx]];
                    let v = data[[c, y, xx]] - step * g;
                    data[[c, y, xx]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    candidate.validate()?;
    Ok(candidate)
}

/// Render the prototype's content in the unknown's style. Deterministic in
/// (unknown, prototype, config); if the objective diverges the step size is
/// halved once before giving up.
pub fn style_transfer(
    unknown: &ImageTensor,
    prototype: &ImageTensor,
    config: &StyleTransferConfig,
) -> Result<ImageTensor> {
    config.validate()?;
    if unknown.size() != prototype.size() {
        return Err(Error::Shape(format!(
            "unknown size {} does not match prototype size {}",
            unknown.size(),
            prototype.size()
        )));
    }
    let extractor = FeatureExtractor::new(config.feature_extractor_seed);
    let xe = batch_images::<f32>(&[unknown], unknown.size())?;
    let target_grams = extractor.grams(&xe);
    match optimize(&target_grams, prototype, &extractor, config, config.step_size) {
        Ok(img) => Ok(img),
        Err(Error::Numerical { .. }) => {
            log::warn!(
                "style transfer diverged at step size {}; retrying at {}",
                config.step_size,
                config.step_size / 2.0
            );
            optimize(
                &target_grams,
                prototype,
                &extractor,
                config,
                config.step_size / 2.0,
            )
        }
        Err(e) => Err(e),
    }
}

/// How many stylizations each buffered unknown spawns.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Independent noise seeds (xi draws) per buffered unknown.
    pub seeds_per_entry: usize,
    /// Random original-image content draws per noise seed, on top of the
    /// pseudo-label's prototype.
    pub draws_per_seed: usize,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            seeds_per_entry: 3,
            draws_per_seed: 4,
        }
    }
}

/// One manifest line: where an augmented sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub aug_path: String,
    pub label: u32,
    pub unknown_id: u64,
    pub xi_seed: u64,
}

/// The augmentation set B': stylized samples plus their provenance manifest.
#[derive(Clone, Debug, Default)]
pub struct AugmentationSet {
    pub samples: Vec<LabeledSample>,
    pub manifest: Vec<ManifestRow>,
}

impl AugmentationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stylize each buffered unknown onto (a) the prototype of its pseudo-label
/// and (b) seeded random draws of original training images, labeling every
/// output with its content source. Produces
/// |buffer| × seeds_per_entry × (1 + draws_per_seed) samples.
pub fn build_augmentation_set(
    entries: &[BufferedUnknown],
    catalog: &PrototypeCatalog,
    originals: &[LabeledSample],
    options: &AugmentOptions,
    config: &StyleTransferConfig,
) -> Result<AugmentationSet> {
    if entries.is_empty() {
        log::warn!("augmentation requested on an empty buffer; returning an empty set");
        return Ok(AugmentationSet::default());
    }
    if options.seeds_per_entry == 0 {
        return Err(Error::Config("seeds_per_entry must be at least 1".into()));
    }
    if options.draws_per_seed > 0 && originals.is_empty() {
        return Err(Error::Validation(
            "content draws requested but the original pool is empty".into(),
        ));
    }

    struct Job<'a> {
        unknown: &'a ImageTensor,
        unknown_id: u64,
        content: &'a ImageTensor,
        label: u32,
        xi: u64,
        name: String,
    }

    let mut jobs: Vec<Job<'_>> = Vec::new();
    for entry in entries {
        let pseudo = entry.verdict.nearest_class;
        let prototype = catalog.prototype(pseudo)?;
        for s in 0..options.seeds_per_entry {
            let xi = rng::derive(
                rng::derive(config.noise_seed, "entry", entry.seq),
                "xi",
                s as u64,
            );
            jobs.push(Job {
                unknown: &entry.image,
                unknown_id: entry.seq,
                content: prototype,
                label: pseudo,
                xi,
                name: format!("aug_{:06}_{s}_proto.png", entry.seq),
            });
            let mut r = rng::chacha(rng::derive(xi, "draws", 0));
            for d in 0..options.draws_per_seed {
                let source = &originals[r.random_range(0..originals.len())];
                catalog.entry(source.label)?;
                jobs.push(Job {
                    unknown: &entry.image,
                    unknown_id: entry.seq,
                    content: &source.image,
                    label: source.label,
                    xi,
                    name: format!("aug_{:06}_{s}_draw{d}.png", entry.seq),
                });
            }
        }
    }

    let results: Vec<(LabeledSample, ManifestRow)> = jobs
        .par_iter()
        .map(|job| -> Result<(LabeledSample, ManifestRow)> {
            let mut job_config = *config;
            job_config.noise_seed = job.xi;
            let image = style_transfer(job.unknown, job.content, &job_config)?;
            Ok((
                LabeledSample {
                    image,
                    label: job.label,
                    origin: Origin::Augmented,
                    provenance_seed: job.xi,
                },
                ManifestRow {
                    aug_path: job.name.clone(),
                    label: job.label,
                    unknown_id: job.unknown_id,
                    xi_seed: job.xi,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let (samples, manifest) = results.into_iter().unzip();
    Ok(AugmentationSet { samples, manifest })
}

/// Write augmented PNGs plus `manifest.csv` into a directory.
pub fn save_augmentation_set(set: &AugmentationSet, dir: &Path) -> Result<()> {
    if set.samples.len() != set.manifest.len() {
        return Err(Error::Contract(
            "augmentation manifest does not cover the sample list".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (sample, row) in set.samples.iter().zip(&set.manifest) {
        sample.image.save_png(&dir.join(&row.aug_path))?;
    }
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    for row in &set.manifest {
        writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Read an augmentation directory back; labels and seeds come from the
/// manifest.
pub fn load_augmentation_set(dir: &Path) -> Result<AugmentationSet> {
    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest_path)
        .map_err(|_| Error::Ingestion(format!("{}: manifest missing", manifest_path.display())))?;
    let mut samples = Vec::new();
    let mut manifest = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow =
            row.map_err(|e| Error::Ingestion(format!("{}: {e}", manifest_path.display())))?;
        let image = ImageTensor::load(&dir.join(&row.aug_path), None)?;
        samples.push(LabeledSample {
            image,
            label: row.label,
            origin: Origin::Augmented,
            provenance_seed: row.xi_seed,
        });
        manifest.push(row);
    }
    Ok(AugmentationSet { samples, manifest })
}

/// A shuffled blend of original and augmented samples at ratio `p`.
#[derive(Clone, Debug)]
pub struct MixedDataset {
    pub samples: Vec<LabeledSample>,
    pub ratio_p: f64,
    /// (drawn from original pool, drawn from augmented pool).
    pub origin_counts: (usize, usize),
}

fn draw_samples(
    pool: &[LabeledSample],
    n: usize,
    seed: u64,
    side: &str,
) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Validation(format!(
            "{side} pool is empty but {n} samples were requested"
        )));
    }
    let mut r = rng::chacha(seed);
    if n <= pool.len() {
        let idx = rand::seq::index::sample(&mut r, pool.len(), n);
        Ok(idx.iter().map(|i| pool[i].clone()).collect())
    } else {
        log::warn!(
            "{side} pool has {} samples; drawing {n} with replacement",
            pool.len()
        );
        Ok((0..n)
            .map(|_| pool[r.random_range(0..pool.len())].clone())
            .collect())
    }
}

/// Blend pools to exactly `target_size` samples: round(p·target_size) from
/// the original pool (ties round to even) and the rest from the augmented
/// pool, then a seeded shuffle. Draws avoid replacement whenever the pool is
/// large enough.
pub fn mix_datasets(
    original: &[LabeledSample],
    augmented: &[LabeledSample],
    p: f64,
    target_size: usize,
    seed: u64,
) -> Result<MixedDataset> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "mixing ratio p {p} must lie in [0, 1]"
        )));
    }
    if target_size == 0 {
        return Err(Error::Validation("target_size must be at least 1".into()));
    }
    let n_orig = (p * target_size as f64).round_ties_even() as usize;
    let n_aug = target_size - n_orig;
    let mut samples = draw_samples(original, n_orig, rng::derive(seed, "mix-original", 0), "original")?;
    samples.extend(draw_samples(
        augmented,
        n_aug,
        rng::derive(seed, "mix-augmented", 0),
        "augmented",
    )?);
    let mut r = rng::chacha(rng::derive(seed, "mix-shuffle", 0));
    samples.shuffle(&mut r);
    Ok(MixedDataset {
        samples,
        ratio_p: p,
        origin_counts: (n_orig, n_aug),
    })
}

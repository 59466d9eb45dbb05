//! Variational prototyping encoder: a conv encoder to a Gaussian latent,
//! a mirrored transposed-conv decoder that reconstructs class prototype
//! images, and a linear classification head on the latent mean.
//!
//! The latent geometry is the load-bearing property: observations of a class
//! cluster around the embedding of that class's prototype, which gives both
//! a nearest-centroid classifier and a distance-based novelty score.

pub mod checkpoint;
pub mod loss;
pub mod train;

use ndarray::{Array1, Array2, Array4, Axis, NdFloat};

use crate::data::SignClassSpec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::conv::{ConvCache, ConvTCache};
use crate::nn::ops::{sigmoid, softmax_rows, tanh_backward, tanh_forward};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, ParamTensors};
use crate::rng;

pub use checkpoint::{
    checkpoint_dir_name, dataset_fingerprint, latest_checkpoint, load_checkpoint,
    save_checkpoint, CheckpointMeta,
};
pub use loss::{vpe_loss, LossSums};
pub use train::{fit_head, train_vpe, write_training_log, EpochLog, TrainConfig};

/// Latent code z: a d_z-dimensional real vector.
pub type LatentCode = Array1<f32>;

/// How `encode` resolves the latent distribution to a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Return μ(x); deterministic, used at inference.
    Mean,
    /// Reparameterized draw μ + σ⊙ε with ε seeded; used in training.
    Sampled(u64),
}

/// Full trainable parameter set: encoder, decoder, and linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct VpeParams<F> {
    pub enc1: Conv2d<F>,
    pub enc2: Conv2d<F>,
    pub enc3: Conv2d<F>,
    pub fc_mu: Linear<F>,
    pub fc_logvar: Linear<F>,
    pub dec_fc: Linear<F>,
    pub dec1: ConvTranspose2d<F>,
    pub dec2: ConvTranspose2d<F>,
    pub dec3: ConvTranspose2d<F>,
    pub head: Linear<F>,
    pub canvas: usize,
    pub d_z: usize,
    /// Bumped on every (re)training; catalogs record the version they were
    /// computed against.
    pub version: u64,
}

impl<F: NdFloat> VpeParams<F> {
    /// Three stride-2 conv blocks need the canvas divisible by 8.
    pub fn new(
        canvas: usize,
        d_z: usize,
        channels: [usize; 3],
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if canvas < 8 || canvas % 8 != 0 {
            return Err(Error::Config(format!(
                "canvas {canvas} must be a positive multiple of 8"
            )));
        }
        if d_z < 2 {
            return Err(Error::Config(format!("d_z {d_z} below minimum 2")));
        }
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        let [c1, c2, c3] = channels;
        let side = canvas / 8;
        let flat = c3 * side * side;
        let mut r = rng::chacha(rng::derive(seed, "init", 0));
        let mut fc_logvar = Linear::new(flat, d_z, &mut r);
        // Start with small posterior variance (σ ≈ e⁻²) so early sampled
        // codes stay close to the mean and training does not thrash.
        fc_logvar.bias.fill(F::from(-4.0).unwrap());
        Ok(Self {
            enc1: Conv2d::new(3, c1, 3, 2, 1, &mut r),
            enc2: Conv2d::new(c1, c2, 3, 2, 1, &mut r),
            enc3: Conv2d::new(c2, c3, 3, 2, 1, &mut r),
            fc_mu: Linear::new(flat, d_z, &mut r),
            fc_logvar,
            dec_fc: Linear::new(d_z, flat, &mut r),
            dec1: ConvTranspose2d::new(c3, c2, 3, 2, 1, 1, &mut r),
            dec2: ConvTranspose2d::new(c2, c1, 3, 2, 1, 1, &mut r),
            dec3: ConvTranspose2d::new(c1, 3, 3, 2, 1, 1, &mut r),
            head: Linear::new(d_z, class_count, &mut r),
            canvas,
            d_z,
            version: 0,
        })
    }

    pub fn channels(&self) -> [usize; 3] {
        [
            self.enc1.weight.dim().0,
            self.enc2.weight.dim().0,
            self.enc3.weight.dim().0,
        ]
    }

    pub fn class_count(&self) -> usize {
        self.head.out_dim()
    }

    fn feat_side(&self) -> usize {
        self.canvas / 8
    }

    fn flat_dim(&self) -> usize {
        self.channels()[2] * self.feat_side() * self.feat_side()
    }
}

/// Encoder activations and layer caches kept for backpropagation.
pub struct EncCache<F> {
    pub x: Array4<F>,
    a1: Array4<F>,
    a2: Array4<F>,
    a3: Array4<F>,
    c1: ConvCache<F>,
    c2: ConvCache<F>,
    c3: ConvCache<F>,
    flat: Array2<F>,
    pub mu: Array2<F>,
    pub logvar: Array2<F>,
}

/// Decoder activations and layer caches kept for backpropagation.
pub struct DecCache<F> {
    z: Array2<F>,
    d: Array2<F>,
    u0: Array4<F>,
    u1: Array4<F>,
    u2: Array4<F>,
    t1: ConvTCache<F>,
    t2: ConvTCache<F>,
    t3: ConvTCache<F>,
    pub logits: Array4<F>,
}

impl<F: NdFloat> VpeParams<F> {
    /// Encoder forward over a batch (n, 3, canvas, canvas).
    pub fn encode_forward(&self, x: Array4<F>) -> EncCache<F> {
        let n = x.dim().0;
        let (y1, c1) = self.enc1.forward(&x);
        let a1 = tanh_forward(&y1);
        let (y2, c2) = self.enc2.forward(&a1);
        let a2 = tanh_forward(&y2);
        let (y3, c3) = self.enc3.forward(&a2);
        let a3 = tanh_forward(&y3);
        let flat = a3
            .view()
            .into_shape_with_order((n, self.flat_dim()))
            .unwrap()
            .to_owned();
        let mu = self.fc_mu.forward(&flat);
        let logvar = self.fc_logvar.forward(&flat);
        EncCache {
            x,
            a1,
            a2,
            a3,
            c1,
            c2,
            c3,
            flat,
            mu,
            logvar,
        }
    }

    /// Backpropagate gradients at (μ, log σ²) through the encoder,
    /// accumulating parameter gradients into `grads`.
    pub fn encode_backward(
        &self,
        cache: &EncCache<F>,
        dmu: &Array2<F>,
        dlogvar: &Array2<F>,
        grads: &mut Self,
    ) {
        let (dflat_mu, g_mu) = self.fc_mu.backward(&cache.flat, dmu);
        let (dflat_lv, g_lv) = self.fc_logvar.backward(&cache.flat, dlogvar);
        grads.fc_mu.accumulate(&g_mu);
        grads.fc_logvar.accumulate(&g_lv);
        let dflat = dflat_mu + dflat_lv;
        let da3 = dflat
            .into_shape_with_order(cache.a3.dim())
            .unwrap();
        let dy3 = tanh_backward(&da3, &cache.a3);
        let (da2, g3) = self.enc3.backward(&dy3, &cache.c3);
        grads.enc3.accumulate(&g3);
        let dy2 = tanh_backward(&da2, &cache.a2);
        let (da1, g2) = self.enc2.backward(&dy2, &cache.c2);
        grads.enc2.accumulate(&g2);
        let dy1 = tanh_backward(&da1, &cache.a1);
        let (_dx, g1) = self.enc1.backward(&dy1, &cache.c1);
        grads.enc1.accumulate(&g1);
    }

    /// Decoder forward from latent codes (n, d_z) to pre-sigmoid image
    /// logits (n, 3, canvas, canvas).
    pub fn decode_forward(&self, z: Array2<F>) -> DecCache<F> {
        let n = z.dim().0;
        let side = self.feat_side();
        let c3 = self.channels()[2];
        let d_pre = self.dec_fc.forward(&z);
        let d = tanh_forward(&d_pre);
        let u0 = d
            .view()
            .into_shape_with_order((n, c3, side, side))
            .unwrap()
            .to_owned();
        let (y1, t1) = self.dec1.forward(&u0);
        let u1 = tanh_forward(&y1);
        let (y2, t2) = self.dec2.forward(&u1);
        let u2 = tanh_forward(&y2);
        let (logits, t3) = self.dec3.forward(&u2);
        DecCache {
            z,
            d,
            u0,
            u1,
            u2,
            t1,
            t2,
            t3,
            logits,
        }
    }

    /// Backpropagate image-logit gradients through the decoder; returns the
    /// gradient at z and accumulates parameter gradients into `grads`.
    pub fn decode_backward(
        &self,
        cache: &DecCache<F>,
        dlogits: &Array4<F>,
        grads: &mut Self,
    ) -> Array2<F> {
        let n = dlogits.dim().0;
        let (du2, g3) = self.dec3.backward(dlogits, &cache.t3);
        grads.dec3.accumulate(&g3);
        let dy2 = tanh_backward(&du2, &cache.u2);
        let (du1, g2) = self.dec2.backward(&dy2, &cache.t2);
        grads.dec2.accumulate(&g2);
        let dy1 = tanh_backward(&du1, &cache.u1);
        let (du0, g1) = self.dec1.backward(&dy1, &cache.t1);
        grads.dec1.accumulate(&g1);
        let _ = &cache.u0;
        let dd = du0
            .into_shape_with_order((n, self.flat_dim()))
            .unwrap();
        let dd_pre = tanh_backward(&dd, &cache.d);
        let (dz, g_fc) = self.dec_fc.backward(&cache.z, &dd_pre);
        grads.dec_fc.accumulate(&g_fc);
        dz
    }
}

impl<F: NdFloat> ParamTensors<F> for VpeParams<F> {
    fn zeros_like(&self) -> Self {
        Self {
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            enc3: self.enc3.zeros_like(),
            fc_mu: self.fc_mu.zeros_like(),
            fc_logvar: self.fc_logvar.zeros_like(),
            dec_fc: self.dec_fc.zeros_like(),
            dec1: self.dec1.zeros_like(),
            dec2: self.dec2.zeros_like(),
            dec3: self.dec3.zeros_like(),
            head: self.head.zeros_like(),
            canvas: self.canvas,
            d_z: self.d_z,
            version: self.version,
        }
    }

    fn visit(&self, f: &mut impl FnMut(&[F])) {
        self.enc1.visit(f);
        self.enc2.visit(f);
        self.enc3.visit(f);
        self.fc_mu.visit(f);
        self.fc_logvar.visit(f);
        self.dec_fc.visit(f);
        self.dec1.visit(f);
        self.dec2.visit(f);
        self.dec3.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [F])) {
        self.enc1.visit_mut(f);
        self.enc2.visit_mut(f);
        self.enc3.visit_mut(f);
        self.fc_mu.visit_mut(f);
        self.fc_logvar.visit_mut(f);
        self.dec_fc.visit_mut(f);
        self.dec1.visit_mut(f);
        self.dec2.visit_mut(f);
        self.dec3.visit_mut(f);
        self.head.visit_mut(f);
    }

    fn visit_mut_pair(&mut self, other: &Self, f: &mut impl FnMut(&mut [F], &[F])) {
        self.enc1.visit_mut_pair(&other.enc1, f);
        self.enc2.visit_mut_pair(&other.enc2, f);
        self.enc3.visit_mut_pair(&other.enc3, f);
        self.fc_mu.visit_mut_pair(&other.fc_mu, f);
        self.fc_logvar.visit_mut_pair(&other.fc_logvar, f);
        self.dec_fc.visit_mut_pair(&other.dec_fc, f);
        self.dec1.visit_mut_pair(&other.dec1, f);
        self.dec2.visit_mut_pair(&other.dec2, f);
        self.dec3.visit_mut_pair(&other.dec3, f);
        self.head.visit_mut_pair(&other.head, f);
    }
}

/// Stack images into an (n, 3, canvas, canvas) batch, checking dimensions.
pub fn batch_images<F: NdFloat>(images: &[&ImageTensor], canvas: usize) -> Result<Array4<F>> {
    let mut x = Array4::zeros((images.len(), 3, canvas, canvas));
    for (i, img) in images.iter().enumerate() {
        if img.size() != canvas {
            return Err(Error::Shape(format!(
                "image size {} does not match model canvas {canvas}",
                img.size()
            )));
        }
        let converted = img.data().mapv(|v| F::from(v).unwrap());
        x.index_axis_mut(Axis(0), i).assign(&converted);
    }
    Ok(x)
}

impl VpeParams<f32> {
    /// Encode one image to a latent code.
    pub fn encode(&self, image: &ImageTensor, mode: EncodeMode) -> Result<LatentCode> {
        Ok(self.encode_batch(&[image], mode)?.row(0).to_owned())
    }

    /// Encode many images at once; rows of the result are latent codes.
    pub fn encode_batch(&self, images: &[&ImageTensor], mode: EncodeMode) -> Result<Array2<f32>> {
        let x = batch_images::<f32>(images, self.canvas)?;
        let cache = self.encode_forward(x);
        match mode {
            EncodeMode::Mean => Ok(cache.mu),
            EncodeMode::Sampled(seed) => {
                let mut z = cache.mu.clone();
                for (i, mut row) in z.rows_mut().into_iter().enumerate() {
                    let eps = loss::sample_eps::<f32>(seed, i, self.d_z);
                    for (j, zj) in row.iter_mut().enumerate() {
                        let sigma = (0.5 * cache.logvar[[i, j]]).exp();
                        *zj += sigma * eps[j];
                    }
                }
                Ok(z)
            }
        }
    }

    /// Decode a latent code to an image; the final sigmoid keeps components
    /// in (0, 1).
    pub fn decode(&self, code: &LatentCode) -> Result<ImageTensor> {
        if code.len() != self.d_z {
            return Err(Error::Shape(format!(
                "code dimension {} does not match d_z {}",
                code.len(),
                self.d_z
            )));
        }
        let z = code.clone().insert_axis(Axis(0));
        let cache = self.decode_forward(z);
        let mut img = ImageTensor::zeros(self.canvas);
        for c in 0..3 {
            for y in 0..self.canvas {
                for x in 0..self.canvas {
                    img.set(c, y, x, sigmoid(cache.logits[[0, c, y, x]]));
                }
            }
        }
        Ok(img)
    }
}

/// One class's prototype image and its current latent centroid.
#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub class_id: u32,
    pub prototype: ImageTensor,
    pub centroid: LatentCode,
}

/// All class prototypes plus the encoder version their centroids were
/// computed against.
#[derive(Clone, Debug)]
pub struct PrototypeCatalog {
    pub entries: Vec<CatalogEntry>,
    pub version: u64,
}

impl PrototypeCatalog {
    /// Build a catalog with rendered prototypes and zeroed centroids
    /// (version 0 marks "no encoder yet").
    pub fn render(specs: &[SignClassSpec], canvas: usize, d_z: usize) -> Result<Self> {
        let mut entries = Vec::with_capacity(specs.len());
        for spec in specs {
            entries.push(CatalogEntry {
                class_id: spec.class_id,
                prototype: crate::data::render_prototype(spec, canvas)?,
                centroid: Array1::zeros(d_z),
            });
        }
        entries.sort_by_key(|e| e.class_id);
        Ok(Self {
            entries,
            version: 0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, class_id: u32) -> Result<&CatalogEntry> {
        self.entries
            .iter()
            .find(|e| e.class_id == class_id)
            .ok_or_else(|| Error::Config(format!("class {class_id} not in catalog")))
    }

    pub fn prototype(&self, class_id: u32) -> Result<&ImageTensor> {
        Ok(&self.entry(class_id)?.prototype)
    }
}

/// Re-embed every prototype with the current encoder: centroid_c becomes
/// encode(prototype_c, mean). The catalog inherits the encoder's version.
pub fn compute_centroids(
    catalog: &PrototypeCatalog,
    params: &VpeParams<f32>,
) -> Result<PrototypeCatalog> {
    let images: Vec<&ImageTensor> = catalog.entries.iter().map(|e| &e.prototype).collect();
    let codes = params.encode_batch(&images, EncodeMode::Mean)?;
    let entries = catalog
        .entries
        .iter()
        .zip(codes.rows())
        .map(|(e, row)| CatalogEntry {
            class_id: e.class_id,
            prototype: e.prototype.clone(),
            centroid: row.to_owned(),
        })
        .collect();
    Ok(PrototypeCatalog {
        entries,
        version: params.version,
    })
}

/// Softmax probabilities of the linear head: ŷ = softmax(Wz + b).
pub fn classify(code: &LatentCode, head: &Linear<f32>) -> Result<Array1<f32>> {
    if code.len() != head.in_dim() {
        return Err(Error::Shape(format!(
            "code dimension {} does not match head input {}",
            code.len(),
            head.in_dim()
        )));
    }
    let z = code.clone().insert_axis(Axis(0));
    let probs = softmax_rows(&head.forward(&z));
    Ok(probs.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_catalog;

    fn tiny_params(seed: u64) -> VpeParams<f32> {
        VpeParams::new(16, 4, [4, 6, 8], 3, seed).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_geometry() {
        assert!(VpeParams::<f32>::new(20, 4, [4, 6, 8], 3, 0).is_err());
        assert!(VpeParams::<f32>::new(0, 4, [4, 6, 8], 3, 0).is_err());
        assert!(VpeParams::<f32>::new(16, 1, [4, 6, 8], 3, 0).is_err());
        assert!(VpeParams::<f32>::new(16, 4, [4, 6, 8], 0, 0).is_err());
    }

    #[test]
    fn encode_mean_is_deterministic() {
        let p = tiny_params(1);
        let img = ImageTensor::filled(16, [0.3, 0.6, 0.9]);
        let a = p.encode(&img, EncodeMode::Mean).unwrap();
        let b = p.encode(&img, EncodeMode::Mean).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn sampled_encoding_is_seed_deterministic_and_mean_plus_noise() {
        let p = tiny_params(2);
        let img = ImageTensor::filled(16, [0.5, 0.5, 0.5]);
        let s1 = p.encode(&img, EncodeMode::Sampled(7)).unwrap();
        let s2 = p.encode(&img, EncodeMode::Sampled(7)).unwrap();
        let s3 = p.encode(&img, EncodeMode::Sampled(8)).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn zero_variance_sampling_collapses_to_mean() {
        let mut p = tiny_params(3);
        // Forcing σ → 0 through an extreme log-variance bias; weights zeroed
        // so the bias fully determines the output.
        p.fc_logvar.weight.fill(0.0);
        p.fc_logvar.bias.fill(-120.0);
        let img = ImageTensor::filled(16, [0.2, 0.4, 0.8]);
        let mean = p.encode(&img, EncodeMode::Mean).unwrap();
        let sampled = p.encode(&img, EncodeMode::Sampled(99)).unwrap();
        for (a, b) in mean.iter().zip(sampled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_output_stays_in_unit_range_and_round_trips_shape() {
        let p = tiny_params(4);
        for seed in 0..5u64 {
            let mut r = rng::chacha(seed);
            let code: LatentCode = Array1::from_shape_fn(4, |_| {
                rand::Rng::random_range(&mut r, -10.0f32..10.0)
            });
            let img = p.decode(&code).unwrap();
            assert_eq!(img.size(), 16);
            assert!(img.validate().is_ok());
        }
        let bad: LatentCode = Array1::zeros(7);
        assert!(p.decode(&bad).is_err());
    }

    #[test]
    fn encode_rejects_wrong_canvas() {
        let p = tiny_params(5);
        let img = ImageTensor::filled(32, [0.5, 0.5, 0.5]);
        let err = p.encode(&img, EncodeMode::Mean).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn classify_matches_closed_form() {
        // z=(1,0), W=[[2,0],[0,2]], b=0 -> softmax(2,0).
        let head = Linear {
            weight: ndarray::arr2(&[[2.0f32, 0.0], [0.0, 2.0]]),
            bias: Array1::zeros(2),
        };
        let z: LatentCode = ndarray::arr1(&[1.0, 0.0]);
        let probs = classify(&z, &head).unwrap();
        let e2 = (2.0f64).exp();
        assert!((f64::from(probs[0]) - e2 / (e2 + 1.0)).abs() < 1e-6);
        assert!((f64::from(probs[1]) - 1.0 / (e2 + 1.0)).abs() < 1e-6);

        // W = 0, b = 0, K = 4 -> uniform.
        let head0 = Linear {
            weight: Array2::zeros((4, 2)),
            bias: Array1::zeros(4),
        };
        let probs = classify(&ndarray::arr1(&[3.0, -1.0]), &head0).unwrap();
        for &p in probs.iter() {
            assert!((p - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn centroids_are_pure_in_params_and_prototypes() {
        let p = tiny_params(6);
        let specs = default_catalog(3).unwrap();
        let catalog = PrototypeCatalog::render(&specs, 16, 4).unwrap();
        let a = compute_centroids(&catalog, &p).unwrap();
        let b = compute_centroids(&catalog, &p).unwrap();
        for (x, y) in a.entries.iter().zip(b.entries.iter()) {
            assert_eq!(x.centroid, y.centroid);
        }
        assert_eq!(a.version, p.version);
    }
}

//! Square RGB image tensor with components in [0, 1].
//!
//! `ImageTensor` is the universal observation carrier: rendered prototypes,
//! synthesized observations, degraded inputs, and stylized augmentations are
//! all values of this type. Data is stored channels-first (3, H, W).

use std::path::Path;

use image::ImageReader;
use ndarray::Array3;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// All-zero image of the given square size.
    pub fn zeros(size: usize) -> Self {
        Self {
            data: Array3::zeros((CHANNELS, size, size)),
        }
    }

    /// Constant-fill image.
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::zeros(size);
        for c in 0..CHANNELS {
            img.data.index_axis_mut(ndarray::Axis(0), c).fill(rgb[c]);
        }
        img
    }

    /// Build from a generator over (channel, y, x).
    pub fn from_fn(size: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        Self {
            data: Array3::from_shape_fn((CHANNELS, size, size), |(c, y, x)| f(c, y, x)),
        }
    }

    /// Wrap an existing (3, H, W) array, validating the range invariant.
    pub fn from_chw(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != CHANNELS || h != w || h == 0 {
            return Err(Error::Shape(format!(
                "expected square (3, N, N) image, got ({c}, {h}, {w})"
            )));
        }
        let img = Self { data };
        img.validate()?;
        Ok(img)
    }

    pub fn size(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[[c, y, x]]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[[c, y, x]] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for c in 0..CHANNELS {
            self.set(c, y, x, rgb[c]);
        }
    }

    /// Check the range invariant: every component finite and within [0, 1].
    pub fn validate(&self) -> Result<()> {
        for &v in self.data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "image component {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn clamp_in_place(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Mean absolute per-component deviation from another image.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.size(), other.size(), "image sizes must match");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f64::from(a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Mean squared per-component deviation from another image.
    pub fn mse(&self, other: &Self) -> f64 {
        assert_eq!(self.size(), other.size(), "image sizes must match");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = f64::from(a - b);
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Encode as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let size = self.size() as u32;
        let mut rgb = image::RgbImage::new(size, size);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            let p = self.pixel(y as usize, x as usize);
            *px = image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]);
        }
        rgb.save(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }

    /// Decode any supported raster file (PNG, PPM, ...), optionally resizing
    /// to a square canvas. Components are normalized to [0, 1].
    pub fn load(path: &Path, canvas: Option<usize>) -> Result<Self> {
        let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
        let decoded = reader
            .decode()
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
        let rgb = match canvas {
            Some(side) => image::imageops::resize(
                &decoded.to_rgb8(),
                side as u32,
                side as u32,
                image::imageops::FilterType::Triangle,
            ),
            None => decoded.to_rgb8(),
        };
        let (w, h) = rgb.dimensions();
        if w != h {
            return Err(Error::Shape(format!(
                "{}: non-square {w}x{h} image requires an explicit canvas",
                path.display()
            )));
        }
        let mut img = Self::zeros(h as usize);
        for (x, y, px) in rgb.enumerate_pixels() {
            img.set_pixel(
                y as usize,
                x as usize,
                [
                    f32::from(px[0]) / 255.0,
                    f32::from(px[1]) / 255.0,
                    f32::from(px[2]) / 255.0,
                ],
            );
        }
        Ok(img)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

//! Parametric image degradations: the controllable stand-in for real-world
//! sign weathering (rust blotches, fading, occlusion, graffiti).
//!
//! All four kinds share one structure: a severity-independent target layer is
//! blended over the input with per-pixel weight w(severity) that is 0 at
//! severity 0 and non-decreasing in severity. That makes the identity case
//! bit-exact and mean absolute deviation provably monotone, which the test
//! suite and the threshold-calibration oracle both rely on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::noise::fbm;
use crate::data::render::BACKGROUND;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::hash_unit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Rust,
    Fade,
    Occlusion,
    Graffiti,
}

impl DegradationKind {
    pub const ALL: [Self; 4] = [Self::Rust, Self::Fade, Self::Occlusion, Self::Graffiti];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rust => "rust",
            Self::Fade => "fade",
            Self::Occlusion => "occlusion",
            Self::Graffiti => "graffiti",
        }
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rust" => Ok(Self::Rust),
            "fade" => Ok(Self::Fade),
            "occlusion" => Ok(Self::Occlusion),
            "graffiti" => Ok(Self::Graffiti),
            other => Err(Error::Config(format!(
                "unknown degradation kind {other:?} (expected rust|fade|occlusion|graffiti)"
            ))),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub kind: DegradationKind,
    pub severity: f64,
    pub seed: u64,
}

impl DegradationRecipe {
    pub fn new(kind: DegradationKind, severity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) || !severity.is_finite() {
            return Err(Error::Validation(format!(
                "degradation severity {severity} outside [0, 1]"
            )));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }
}

/// Parse a recipe file: one `kind severity seed` triple per line. Blank lines
/// and `#` comments are ignored.
pub fn parse_recipes(text: &str) -> Result<Vec<DegradationRecipe>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let missing =
            |what: &str| Error::Config(format!("recipe line {}: missing {what}", lineno + 1));
        let kind: DegradationKind = parts.next().ok_or_else(|| missing("kind"))?.parse()?;
        let severity: f64 = parts
            .next()
            .ok_or_else(|| missing("severity"))?
            .parse()
            .map_err(|e| Error::Config(format!("recipe line {}: bad severity: {e}", lineno + 1)))?;
        let seed: u64 = parts
            .next()
            .ok_or_else(|| missing("seed"))?
            .parse()
            .map_err(|e| Error::Config(format!("recipe line {}: bad seed: {e}", lineno + 1)))?;
        if parts.next().is_some() {
            return Err(Error::Config(format!(
                "recipe line {}: trailing tokens",
                lineno + 1
            )));
        }
        out.push(DegradationRecipe::new(kind, severity, seed)?);
    }
    Ok(out)
}

pub fn format_recipes(recipes: &[DegradationRecipe]) -> String {
    let mut s = String::new();
    for r in recipes {
        s.push_str(&format!("{} {} {}\n", r.kind, r.severity, r.seed));
    }
    s
}

/// Apply one degradation. Pure in (image, recipe); severity 0 returns the
/// input unchanged, bit for bit.
pub fn apply_degradation(image: &ImageTensor, recipe: &DegradationRecipe) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&recipe.severity) || !recipe.severity.is_finite() {
        return Err(Error::Validation(format!(
            "degradation severity {} outside [0, 1]",
            recipe.severity
        )));
    }
    if recipe.severity == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    match recipe.kind {
        DegradationKind::Rust => rust(&mut out, recipe.severity, recipe.seed),
        DegradationKind::Fade => fade(&mut out, recipe.severity),
        DegradationKind::Occlusion => occlusion(&mut out, recipe.severity, recipe.seed),
        DegradationKind::Graffiti => graffiti(&mut out, recipe.severity, recipe.seed),
    }
    out.clamp_in_place();
    Ok(out)
}

fn blend_px(img: &mut ImageTensor, y: usize, x: usize, target: [f32; 3], w: f64) {
    if w <= 0.0 {
        return;
    }
    let w = w.min(1.0) as f32;
    let p = img.pixel(y, x);
    img.set_pixel(
        y,
        x,
        [
            p[0] + (target[0] - p[0]) * w,
            p[1] + (target[1] - p[1]) * w,
            p[2] + (target[2] - p[2]) * w,
        ],
    );
}

/// Orange-brown staining: octave noise thresholded into dense patches whose
/// extent and opacity both grow with severity, each surrounded by a graded
/// halo that bleeds below the threshold. Heavy rust therefore tints the whole
/// surface instead of leaving clean islands between blotches.
fn rust(img: &mut ImageTensor, severity: f64, seed: u64) {
    let n = img.size();
    let inv = 1.0 / n as f64;
    // Threshold drops as severity rises, so the covered set at a lower
    // severity is a subset of the covered set at a higher one.
    let threshold = 0.92 - 0.62 * severity;
    let edge = 0.10;
    let bleed = 0.45;
    let opacity = 0.95 * severity;
    for y in 0..n {
        for x in 0..n {
            let u = x as f64 * inv;
            let v = y as f64 * inv;
            let field = fbm(seed, u, v, 4, 5.0);
            let core = smoothstep(threshold, threshold + edge, field);
            let halo = smoothstep(threshold - bleed, threshold, field);
            let patch = core + 0.35 * halo * (1.0 - core);
            if patch <= 0.0 {
                continue;
            }
            // Per-pixel tint variation, fixed across severities.
            let tint = hash_unit(seed ^ 0x5275_7374, x as u64, y as u64);
            let target = [
                (0.42 + 0.28 * tint) as f32,
                (0.20 + 0.12 * tint) as f32,
                (0.05 + 0.06 * tint) as f32,
            ];
            blend_px(img, y, x, target, opacity * patch);
        }
    }
}

/// Desaturation plus contrast compression: a single blend toward the image's
/// own low-contrast grayscale rendition.
fn fade(img: &mut ImageTensor, severity: f64) {
    let n = img.size();
    let w = 0.92 * severity;
    for y in 0..n {
        for x in 0..n {
            let p = img.pixel(y, x);
            let lum = 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2];
            let gray = 0.5 + (lum - 0.5) * 0.35;
            blend_px(img, y, x, [gray, gray, gray], w);
        }
    }
}

/// Background-colored rectangles that grow outward from seeded anchor points
/// as severity rises, so covered regions are nested across severities.
fn occlusion(img: &mut ImageTensor, severity: f64, seed: u64) {
    let n = img.size() as f64;
    for k in 0..2u64 {
        let cx = n * (0.25 + 0.5 * hash_unit(seed, 2 * k, 0));
        let cy = n * (0.25 + 0.5 * hash_unit(seed, 2 * k + 1, 1));
        let max_hw = n * (0.10 + 0.14 * hash_unit(seed, k, 2));
        let max_hh = n * (0.10 + 0.14 * hash_unit(seed, k, 3));
        let hw = max_hw * severity;
        let hh = max_hh * severity;
        let x0 = (cx - hw).floor().max(0.0) as usize;
        let x1 = ((cx + hw).ceil() as usize).min(img.size());
        let y0 = (cy - hh).floor().max(0.0) as usize;
        let y1 = ((cy + hh).ceil() as usize).min(img.size());
        for y in y0..y1 {
            for x in x0..x1 {
                // Soft edge keyed to the *maximal* rectangle so per-pixel
                // weight only grows with severity.
                let dx = ((x as f64 + 0.5) - cx).abs();
                let dy = ((y as f64 + 0.5) - cy).abs();
                let wx = smoothstep(hw, (hw - 1.0).max(0.0), dx);
                let wy = smoothstep(hh, (hh - 1.0).max(0.0), dy);
                blend_px(img, y, x, BACKGROUND, wx * wy);
            }
        }
    }
}

/// Spray strokes: three fixed capsule segments per seed, painted with opacity
/// proportional to severity.
fn graffiti(img: &mut ImageTensor, severity: f64, seed: u64) {
    let n = img.size() as f64;
    let paint = [
        (0.15 + 0.7 * hash_unit(seed, 0, 100)) as f32,
        (0.15 + 0.7 * hash_unit(seed, 1, 100)) as f32,
        (0.15 + 0.7 * hash_unit(seed, 2, 100)) as f32,
    ];
    let thickness = 0.05 * n;
    let opacity = 0.9 * severity;
    let mut segs = Vec::with_capacity(3);
    for k in 0..3u64 {
        let ax = n * (0.1 + 0.8 * hash_unit(seed, 4 * k, 7));
        let ay = n * (0.1 + 0.8 * hash_unit(seed, 4 * k + 1, 7));
        let bx = n * (0.1 + 0.8 * hash_unit(seed, 4 * k + 2, 7));
        let by = n * (0.1 + 0.8 * hash_unit(seed, 4 * k + 3, 7));
        segs.push((ax, ay, bx, by));
    }
    for y in 0..img.size() {
        for x in 0..img.size() {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut best = f64::INFINITY;
            for &(ax, ay, bx, by) in &segs {
                best = best.min(segment_dist(px, py, ax, ay, bx, by));
            }
            let cov = smoothstep(thickness, thickness - 1.0, best);
            blend_px(img, y, x, paint, opacity * cov);
        }
    }
}

fn segment_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (px - ax - t * dx, py - ay - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Smoothstep from 0 at `e0` to 1 at `e1`; handles descending edges.
fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    if e0 == e1 {
        return if x >= e1 { 1.0 } else { 0.0 };
    }
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_catalog;
    use crate::data::render::render_prototype;
    use proptest::prelude::*;

    fn test_image() -> ImageTensor {
        let spec = &default_catalog(3).unwrap()[0];
        render_prototype(spec, 32).unwrap()
    }

    #[test]
    fn severity_zero_is_bit_exact_identity() {
        let img = test_image();
        for kind in DegradationKind::ALL {
            let recipe = DegradationRecipe::new(kind, 0.0, 99).unwrap();
            let out = apply_degradation(&img, &recipe).unwrap();
            assert_eq!(out, img, "{kind} at severity 0 altered the image");
        }
    }

    #[test]
    fn degradation_is_deterministic() {
        let img = test_image();
        for kind in DegradationKind::ALL {
            let recipe = DegradationRecipe::new(kind, 0.7, 5).unwrap();
            let a = apply_degradation(&img, &recipe).unwrap();
            let b = apply_degradation(&img, &recipe).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deviation_grows_with_severity() {
        let img = test_image();
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        for kind in DegradationKind::ALL {
            let devs: Vec<f64> = grid
                .iter()
                .map(|&s| {
                    let recipe = DegradationRecipe::new(kind, s, 13).unwrap();
                    apply_degradation(&img, &recipe).unwrap().mean_abs_diff(&img)
                })
                .collect();
            for w in devs.windows(2) {
                assert!(
                    w[1] >= w[0],
                    "{kind}: deviation not monotone over {devs:?}"
                );
            }
            assert!(
                devs[4] > devs[0],
                "{kind}: severity 1.0 left the image unchanged"
            );
        }
    }

    #[test]
    fn heavy_rust_deviates_more_than_light_rust() {
        let img = test_image();
        let light = apply_degradation(&img, &DegradationRecipe::new(DegradationKind::Rust, 0.2, 3).unwrap())
            .unwrap();
        let heavy = apply_degradation(&img, &DegradationRecipe::new(DegradationKind::Rust, 1.0, 3).unwrap())
            .unwrap();
        assert!(heavy.mean_abs_diff(&img) > light.mean_abs_diff(&img));
    }

    #[test]
    fn out_of_range_severity_is_rejected() {
        assert!(DegradationRecipe::new(DegradationKind::Fade, 1.5, 0).is_err());
        assert!(DegradationRecipe::new(DegradationKind::Fade, -0.1, 0).is_err());
        let img = test_image();
        let bad = DegradationRecipe {
            kind: DegradationKind::Fade,
            severity: 2.0,
            seed: 0,
        };
        let err = apply_degradation(&img, &bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn recipe_text_round_trips() {
        let recipes = vec![
            DegradationRecipe::new(DegradationKind::Rust, 0.8, 42).unwrap(),
            DegradationRecipe::new(DegradationKind::Occlusion, 0.25, 7).unwrap(),
        ];
        let text = format_recipes(&recipes);
        let back = parse_recipes(&text).unwrap();
        assert_eq!(recipes, back);

        let commented = format!("# weathering batch\n\n{text}");
        assert_eq!(parse_recipes(&commented).unwrap(), recipes);
    }

    #[test]
    fn malformed_recipe_lines_are_rejected() {
        assert!(parse_recipes("rust 0.5").is_err());
        assert!(parse_recipes("mud 0.5 3").is_err());
        assert!(parse_recipes("rust 1.5 3").is_err());
        assert!(parse_recipes("rust 0.5 3 extra").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Range safety: any recipe on any pattern keeps components in [0,1].
        #[test]
        fn outputs_stay_in_range(
            kind_idx in 0usize..4,
            severity in 0.0f64..=1.0,
            seed in any::<u64>(),
            pattern in any::<u64>(),
        ) {
            let img = ImageTensor::from_fn(16, |c, y, x| {
                crate::rng::hash_unit(pattern, (c * 16 + y) as u64, x as u64) as f32
            });
            let recipe = DegradationRecipe::new(DegradationKind::ALL[kind_idx], severity, seed).unwrap();
            let out = apply_degradation(&img, &recipe).unwrap();
            prop_assert!(out.validate().is_ok());
        }
    }
}

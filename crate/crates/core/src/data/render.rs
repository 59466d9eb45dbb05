//! Deterministic anti-aliased rendering of sign prototypes.
//!
//! Shapes and glyphs are signed distance fields sampled at pixel centers;
//! coverage at the zero crossing is resolved with a one-pixel linear ramp.
//! The result is a pure function of (spec, canvas).

use crate::data::glyphs::{glyph_sdf, GLYPH_COUNT};
use crate::data::{SignClassSpec, SignShape};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Neutral background all prototypes share; occlusion patches reuse it.
pub const BACKGROUND: [f32; 3] = [0.72, 0.72, 0.70];

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Signed distance from point (u, v) to the shape boundary, in units of the
/// canvas half-extent. `a` is the shape's inradius in those units.
fn shape_sdf(shape: SignShape, u: f64, v: f64, a: f64) -> f64 {
    let (au, av) = (u.abs(), v.abs());
    match shape {
        SignShape::Circle => (u * u + v * v).sqrt() - a,
        SignShape::Square => au.max(av) - a,
        SignShape::Diamond => (au + av) / SQRT_2 - a,
        // Intersection of a square and a diamond with equal inradius.
        SignShape::Octagon => (au.max(av)).max((au + av) / SQRT_2) - a,
        // Equilateral, apex up (screen v grows downward). Intersection of
        // three half-planes with unit normals, all at inradius a.
        SignShape::Triangle => {
            let d1 = v - a;
            let d2 = (SQRT_3 * u - v) / 2.0 - a;
            let d3 = (-SQRT_3 * u - v) / 2.0 - a;
            d1.max(d2).max(d3)
        }
    }
}

/// Inradius for each shape as a fraction of the half-extent, chosen so the
/// full outline (circumradius) stays inside the canvas.
fn inradius_frac(shape: SignShape) -> f64 {
    match shape {
        SignShape::Circle => 0.90,
        SignShape::Square => 0.66,
        SignShape::Diamond => 0.64,
        SignShape::Octagon => 0.83,
        SignShape::Triangle => 0.45,
    }
}

/// Coverage of the negative side of a signed distance, with a linear
/// anti-aliasing ramp one pixel wide.
fn coverage(sdf: f64, pixel: f64) -> f64 {
    (0.5 - sdf / pixel).clamp(0.0, 1.0)
}

fn luminance(rgb: [f32; 3]) -> f32 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

fn mix(base: [f32; 3], over: [f32; 3], alpha: f64) -> [f32; 3] {
    let a = alpha as f32;
    [
        base[0] + (over[0] - base[0]) * a,
        base[1] + (over[1] - base[1]) * a,
        base[2] + (over[2] - base[2]) * a,
    ]
}

/// Render the canonical image for a sign class: filled shape with a colored
/// border and a centered glyph on the neutral background.
pub fn render_prototype(spec: &SignClassSpec, canvas: usize) -> Result<ImageTensor> {
    if canvas < 16 {
        return Err(Error::Validation(format!(
            "canvas {canvas} below minimum renderable size 16"
        )));
    }
    if spec.glyph_id >= GLYPH_COUNT {
        return Err(Error::Config(format!(
            "glyph_id {} outside the glyph table (0..{GLYPH_COUNT})",
            spec.glyph_id
        )));
    }
    spec.validate_colors()?;

    let half = canvas as f64 / 2.0;
    let pixel = 1.0 / half; // one pixel in normalized units
    let a = inradius_frac(spec.shape);
    let border_w = 0.14;
    let interior = a - border_w;
    // Glyph box scaled to sit inside the interior; triangles get the glyph
    // nudged toward their visual center of mass.
    let glyph_half = 0.74 * interior;
    let glyph_dv = if spec.shape == SignShape::Triangle {
        0.22 * a
    } else {
        0.0
    };

    let glyph_color = if luminance(spec.fill_color) > 0.5 {
        [0.08, 0.08, 0.10]
    } else {
        [0.96, 0.96, 0.94]
    };

    let mut img = ImageTensor::zeros(canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let u = (x as f64 + 0.5 - half) / half;
            let v = (y as f64 + 0.5 - half) / half;

            let d_shape = shape_sdf(spec.shape, u, v, a);
            let d_inner = shape_sdf(spec.shape, u, v, interior);
            let gu = u / glyph_half;
            let gv = (v - glyph_dv) / glyph_half;
            let d_glyph = glyph_sdf(spec.glyph_id, gu, gv) * glyph_half;

            let mut rgb = BACKGROUND;
            rgb = mix(rgb, spec.border_color, coverage(d_shape, pixel));
            rgb = mix(rgb, spec.fill_color, coverage(d_inner, pixel));
            let glyph_cov = coverage(d_glyph, pixel) * coverage(d_inner, pixel);
            rgb = mix(rgb, glyph_color, glyph_cov);
            img.set_pixel(y, x, rgb);
        }
    }
    debug_assert!(img.validate().is_ok());
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_catalog;

    fn stop_like_spec() -> SignClassSpec {
        SignClassSpec {
            class_id: 0,
            shape: SignShape::Octagon,
            border_color: [0.80, 0.06, 0.09],
            fill_color: [0.93, 0.93, 0.90],
            glyph_id: 0, // horizontal bar
        }
    }

    #[test]
    fn render_is_bit_identical_across_calls() {
        let spec = stop_like_spec();
        let a = render_prototype(&spec, 32).unwrap();
        let b = render_prototype(&spec, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn octagon_border_yields_enough_red_pixels() {
        let img = render_prototype(&stop_like_spec(), 32).unwrap();
        assert_eq!(img.size(), 32);
        let mut red_dominant = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let [r, g, b] = img.pixel(y, x);
                if r > g + 0.1 && r > b + 0.1 {
                    red_dominant += 1;
                }
            }
        }
        let frac = red_dominant as f64 / (32.0 * 32.0);
        assert!(frac >= 0.10, "red-dominant fraction {frac:.3} below 0.10");
    }

    #[test]
    fn small_canvas_is_rejected() {
        let err = render_prototype(&stop_like_spec(), 8).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_glyph_is_a_config_error() {
        let mut spec = stop_like_spec();
        spec.glyph_id = GLYPH_COUNT;
        let err = render_prototype(&spec, 32).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn catalog_prototypes_are_pairwise_distinct() {
        let catalog = default_catalog(10).unwrap();
        let imgs: Vec<_> = catalog
            .iter()
            .map(|s| render_prototype(s, 32).unwrap())
            .collect();
        for i in 0..imgs.len() {
            for j in (i + 1)..imgs.len() {
                assert!(
                    imgs[i].mean_abs_diff(&imgs[j]) > 0.01,
                    "classes {i} and {j} render nearly identically"
                );
            }
        }
    }
}

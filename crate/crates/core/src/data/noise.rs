//! Seeded value noise for procedural degradation textures.
//!
//! Lattice values come from a stateless integer hash, so the field is a pure
//! function of (seed, x, y) with no precomputed tables to carry around.

use crate::rng::hash_unit;

/// Smoothstep-interpolated value noise in [0, 1] at unit lattice scale.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let xf = x.floor();
    let yf = y.floor();
    let xi = xf as i64 as u64;
    let yi = yf as i64 as u64;
    let tx = smooth(x - xf);
    let ty = smooth(y - yf);

    let v00 = hash_unit(seed, xi, yi);
    let v10 = hash_unit(seed, xi.wrapping_add(1), yi);
    let v01 = hash_unit(seed, xi, yi.wrapping_add(1));
    let v11 = hash_unit(seed, xi.wrapping_add(1), yi.wrapping_add(1));

    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

/// Octave-summed value noise, renormalized to [0, 1]. `base_scale` is the
/// lattice frequency of the first octave in cycles per unit coordinate.
pub fn fbm(seed: u64, x: f64, y: f64, octaves: u32, base_scale: f64) -> f64 {
    let mut sum = 0.0;
    let mut amplitude = 1.0;
    let mut total = 0.0;
    let mut freq = base_scale;
    for octave in 0..octaves {
        sum += amplitude * value_noise(seed.wrapping_add(octave as u64), x * freq, y * freq);
        total += amplitude;
        amplitude *= 0.5;
        freq *= 2.0;
    }
    sum / total
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

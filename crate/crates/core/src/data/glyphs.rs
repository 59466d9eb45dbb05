//! Fixed glyph table for sign faces: bars, arrows, and digit-like strokes.
//!
//! Glyphs are defined as capsule unions (line segments with a radius) in a
//! normalized [-1, 1]^2 box, plus one annulus. Describing them as signed
//! distance fields keeps rendering resolution-independent and anti-aliasable.

pub const GLYPH_COUNT: u32 = 12;

/// Human-readable glyph names, index-aligned with the table.
pub const GLYPH_NAMES: [&str; GLYPH_COUNT as usize] = [
    "h-bar", "v-bar", "slash", "backslash", "plus", "cross", "arrow-up", "arrow-right", "ring",
    "digit-1", "digit-7", "digit-t",
];

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

const fn cap(ax: f64, ay: f64, bx: f64, by: f64, r: f64) -> Capsule {
    Capsule {
        a: (ax, ay),
        b: (bx, by),
        r,
    }
}

fn capsule_sdf(c: &Capsule, u: f64, v: f64) -> f64 {
    let (ax, ay) = c.a;
    let (bx, by) = c.b;
    let (dx, dy) = (bx - ax, by - ay);
    let (px, py) = (u - ax, v - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt() - c.r
}

const H_BAR: [Capsule; 1] = [cap(-0.60, 0.0, 0.60, 0.0, 0.18)];
const V_BAR: [Capsule; 1] = [cap(0.0, -0.60, 0.0, 0.60, 0.18)];
const SLASH: [Capsule; 1] = [cap(-0.50, 0.50, 0.50, -0.50, 0.16)];
const BACKSLASH: [Capsule; 1] = [cap(-0.50, -0.50, 0.50, 0.50, 0.16)];
const PLUS: [Capsule; 2] = [
    cap(-0.55, 0.0, 0.55, 0.0, 0.14),
    cap(0.0, -0.55, 0.0, 0.55, 0.14),
];
const CROSS: [Capsule; 2] = [
    cap(-0.48, 0.48, 0.48, -0.48, 0.13),
    cap(-0.48, -0.48, 0.48, 0.48, 0.13),
];
const ARROW_UP: [Capsule; 3] = [
    cap(0.0, 0.55, 0.0, -0.15, 0.12),
    cap(0.0, -0.55, -0.38, -0.12, 0.11),
    cap(0.0, -0.55, 0.38, -0.12, 0.11),
];
const ARROW_RIGHT: [Capsule; 3] = [
    cap(-0.55, 0.0, 0.15, 0.0, 0.12),
    cap(0.55, 0.0, 0.12, -0.38, 0.11),
    cap(0.55, 0.0, 0.12, 0.38, 0.11),
];
const DIGIT_1: [Capsule; 3] = [
    cap(-0.28, -0.30, 0.05, -0.58, 0.09),
    cap(0.05, -0.58, 0.05, 0.50, 0.11),
    cap(-0.30, 0.52, 0.40, 0.52, 0.08),
];
const DIGIT_7: [Capsule; 2] = [
    cap(-0.45, -0.55, 0.45, -0.55, 0.09),
    cap(0.45, -0.55, -0.05, 0.55, 0.11),
];
const DIGIT_T: [Capsule; 2] = [
    cap(-0.50, -0.55, 0.50, -0.55, 0.10),
    cap(0.0, -0.55, 0.0, 0.55, 0.11),
];

fn strokes(glyph_id: u32) -> &'static [Capsule] {
    match glyph_id {
        0 => &H_BAR,
        1 => &V_BAR,
        2 => &SLASH,
        3 => &BACKSLASH,
        4 => &PLUS,
        5 => &CROSS,
        6 => &ARROW_UP,
        7 => &ARROW_RIGHT,
        8 => &[], // annulus handled separately
        9 => &DIGIT_1,
        10 => &DIGIT_7,
        11 => &DIGIT_T,
        _ => unreachable!("glyph_id validated by caller"),
    }
}

/// Signed distance to the glyph boundary in glyph-box units; negative inside.
/// Callers must validate `glyph_id < GLYPH_COUNT` beforehand.
pub fn glyph_sdf(glyph_id: u32, u: f64, v: f64) -> f64 {
    let mut d = f64::INFINITY;
    if glyph_id == 8 {
        let r = (u * u + v * v).sqrt();
        d = (r - 0.45).abs() - 0.14;
    }
    for c in strokes(glyph_id) {
        d = d.min(capsule_sdf(c, u, v));
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_has_interior_and_exterior() {
        for id in 0..GLYPH_COUNT {
            let mut inside = 0;
            let mut outside = 0;
            let n = 40;
            for yi in 0..n {
                for xi in 0..n {
                    let u = -1.0 + 2.0 * (xi as f64 + 0.5) / n as f64;
                    let v = -1.0 + 2.0 * (yi as f64 + 0.5) / n as f64;
                    if glyph_sdf(id, u, v) < 0.0 {
                        inside += 1;
                    } else {
                        outside += 1;
                    }
                }
            }
            let frac = inside as f64 / (inside + outside) as f64;
            assert!(
                (0.02..0.60).contains(&frac),
                "glyph {id} ({}) covers {frac:.3} of its box",
                GLYPH_NAMES[id as usize]
            );
        }
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        // Compare coarse occupancy grids; any two glyphs must differ in at
        // least a few cells, otherwise two classes could collapse.
        let grid = |id: u32| -> Vec<bool> {
            let n = 24;
            let mut cells = Vec::with_capacity(n * n);
            for yi in 0..n {
                for xi in 0..n {
                    let u = -1.0 + 2.0 * (xi as f64 + 0.5) / n as f64;
                    let v = -1.0 + 2.0 * (yi as f64 + 0.5) / n as f64;
                    cells.push(glyph_sdf(id, u, v) < 0.0);
                }
            }
            cells
        };
        let grids: Vec<_> = (0..GLYPH_COUNT).map(grid).collect();
        for i in 0..grids.len() {
            for j in (i + 1)..grids.len() {
                let diff = grids[i]
                    .iter()
                    .zip(&grids[j])
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(diff > 10, "glyphs {i} and {j} nearly identical ({diff})");
            }
        }
    }
}

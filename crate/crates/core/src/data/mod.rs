//! Synthetic sign benchmark: class catalog, prototype rendering, observation
//! synthesis, parametric degradations, and dataset IO.

pub mod degrade;
pub mod glyphs;
pub mod io;
pub mod noise;
pub mod render;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use degrade::{
    apply_degradation, format_recipes, parse_recipes, DegradationKind, DegradationRecipe,
};
pub use io::{dataset_index, ingest_gtsrb, load_dataset, save_dataset};
pub use render::render_prototype;
pub use synth::{synthesize_observations, JitterConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignShape {
    Circle,
    Triangle,
    Octagon,
    Diamond,
    Square,
}

/// Canonical description of one sign class; rendering it yields the class
/// prototype image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignClassSpec {
    pub class_id: u32,
    pub shape: SignShape,
    pub border_color: [f32; 3],
    pub fill_color: [f32; 3],
    pub glyph_id: u32,
}

impl SignClassSpec {
    pub fn validate_colors(&self) -> Result<()> {
        for &v in self.border_color.iter().chain(self.fill_color.iter()) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "class {}: color component {v} outside [0, 1]",
                    self.class_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
    UnknownCapture,
}

/// One labeled image plus where it came from. `provenance_seed` records the
/// RNG stream that produced generated samples (0 for file-loaded ones).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub label: u32,
    pub origin: Origin,
    pub provenance_seed: u64,
}

const BORDERS: [[f32; 3]; 4] = [
    [0.80, 0.06, 0.09], // red
    [0.05, 0.15, 0.70], // blue
    [0.10, 0.10, 0.12], // near-black
    [0.05, 0.45, 0.15], // green
];

const FILLS: [[f32; 3]; 4] = [
    [0.93, 0.93, 0.90], // white
    [0.95, 0.78, 0.10], // yellow
    [0.25, 0.45, 0.85], // light blue
    [0.85, 0.20, 0.15], // red
];

const SHAPES: [SignShape; 5] = [
    SignShape::Circle,
    SignShape::Triangle,
    SignShape::Octagon,
    SignShape::Diamond,
    SignShape::Square,
];

/// Deterministic class catalog cycling shapes, palette entries, and glyphs
/// with coprime-ish periods so specs stay pairwise distinct.
pub fn default_catalog(class_count: usize) -> Result<Vec<SignClassSpec>> {
    const MAX_CLASSES: usize = 48;
    if class_count == 0 || class_count > MAX_CLASSES {
        return Err(Error::Config(format!(
            "class_count {class_count} outside 1..={MAX_CLASSES}"
        )));
    }
    let catalog: Vec<SignClassSpec> = (0..class_count)
        .map(|i| SignClassSpec {
            class_id: i as u32,
            shape: SHAPES[i % SHAPES.len()],
            border_color: BORDERS[i % BORDERS.len()],
            fill_color: FILLS[(i / BORDERS.len()) % FILLS.len()],
            glyph_id: (i % glyphs::GLYPH_COUNT as usize) as u32,
        })
        .collect();
    for i in 0..catalog.len() {
        for j in (i + 1)..catalog.len() {
            let a = &catalog[i];
            let b = &catalog[j];
            debug_assert!(
                !(a.shape == b.shape
                    && a.glyph_id == b.glyph_id
                    && a.border_color == b.border_color
                    && a.fill_color == b.fill_color),
                "catalog classes {i} and {j} are visually identical"
            );
        }
    }
    Ok(catalog)
}

/// Generate a full balanced dataset: `per_class` observations of every class
/// in the catalog, grouped by class in catalog order.
pub fn synthesize_dataset(
    catalog: &[SignClassSpec],
    canvas: usize,
    per_class: usize,
    jitter: &JitterConfig,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let mut all = Vec::with_capacity(catalog.len() * per_class);
    for spec in catalog {
        all.extend(synthesize_observations(spec, canvas, per_class, jitter, seed)?);
    }
    Ok(all)
}

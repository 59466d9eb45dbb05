//! Dataset directory IO.
//!
//! Layout: `<root>/<class_id>/<index>.png` plus a `labels.csv` index with
//! columns `path,class_id`. The same index format doubles as the ingestion
//! entry point for external sign archives laid out class-per-subdirectory
//! (PPM or PNG payloads).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, Origin};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    class_id: u32,
}

/// Write samples as PNGs grouped by class, with per-class indices assigned in
/// input order, and emit the `labels.csv` index sorted by (class_id, path).
pub fn save_dataset(root: &Path, samples: &[LabeledSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut per_class_counter: BTreeMap<u32, usize> = BTreeMap::new();
    let mut rows: Vec<IndexRow> = Vec::with_capacity(samples.len());
    for sample in samples {
        let idx = per_class_counter.entry(sample.label).or_insert(0);
        let rel = format!("{}/{}.png", sample.label, idx);
        *idx += 1;
        let class_dir = root.join(sample.label.to_string());
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        sample.image.save_png(&root.join(&rel))?;
        rows.push(IndexRow {
            path: rel,
            class_id: sample.label,
        });
    }
    rows.sort_by(|a, b| (a.class_id, &a.path).cmp(&(b.class_id, &b.path)));

    let index_path = root.join(LABELS_FILE);
    let mut writer = csv::Writer::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| csv_err(&index_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Read a dataset's `labels.csv` index: (path relative to `root`, class id)
/// pairs in the same deterministic order `load_dataset` uses.
pub fn dataset_index(root: &Path) -> Result<Vec<(PathBuf, u32)>> {
    let index_path = root.join(LABELS_FILE);
    if !index_path.is_file() {
        return Err(Error::Ingestion(format!(
            "{}: missing {LABELS_FILE} index",
            root.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    let mut entries = Vec::new();
    for row in reader.deserialize::<IndexRow>() {
        let row = row.map_err(|e| csv_err(&index_path, e))?;
        entries.push((PathBuf::from(row.path), row.class_id));
    }
    if entries.is_empty() {
        return Err(Error::Ingestion(format!(
            "{}: index lists no samples",
            root.display()
        )));
    }
    // Deterministic order regardless of how the index was written.
    entries.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    Ok(entries)
}

/// Load a dataset written by `save_dataset`. Every listed file must decode;
/// images are resized to `canvas` when given, otherwise taken at native size.
pub fn load_dataset(root: &Path, canvas: Option<usize>) -> Result<Vec<LabeledSample>> {
    let entries = dataset_index(root)?;
    let mut samples = Vec::with_capacity(entries.len());
    for (rel, class_id) in entries {
        let image = ImageTensor::load(&root.join(&rel), canvas)?;
        samples.push(LabeledSample {
            image,
            label: class_id,
            origin: Origin::Original,
            provenance_seed: 0,
        });
    }
    Ok(samples)
}

/// Ingest an external archive in class-per-subdirectory layout with a
/// `labels.csv` index. More forgiving than `load_dataset`: payloads may be
/// PPM or PNG, everything is resized to `canvas`, and undecodable files are
/// skipped with a warning as long as they stay under 1% of the index.
pub fn ingest_gtsrb(root: &Path, canvas: usize) -> Result<Vec<LabeledSample>> {
    let entries = dataset_index(root)?;
    let total = entries.len();
    let mut skipped = 0usize;
    let mut samples = Vec::with_capacity(total);
    for (rel, class_id) in entries {
        match ImageTensor::load(&root.join(&rel), Some(canvas)) {
            Ok(image) => samples.push(LabeledSample {
                image,
                label: class_id,
                origin: Origin::Original,
                provenance_seed: 0,
            }),
            Err(e) => {
                skipped += 1;
                log::warn!("skipping {}: {e}", rel.display());
            }
        }
    }
    if skipped * 100 > total {
        return Err(Error::Ingestion(format!(
            "{}: {skipped} of {total} files undecodable (over 1%)",
            root.display()
        )));
    }
    Ok(samples)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthesize_observations, JitterConfig};
    use crate::data::default_catalog;

    fn make_samples() -> Vec<LabeledSample> {
        let catalog = default_catalog(2).unwrap();
        let mut all = Vec::new();
        for spec in &catalog {
            all.extend(
                synthesize_observations(spec, 32, 3, &JitterConfig::default(), 5).unwrap(),
            );
        }
        all
    }

    #[test]
    fn save_then_load_round_trips_within_quantization() {
        let samples = make_samples();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path(), None).unwrap();
        assert_eq!(back.len(), samples.len());
        for (orig, loaded) in samples.iter().zip(&back) {
            assert_eq!(orig.label, loaded.label);
            // PNG stores 8-bit components; loaded values sit on the grid
            // nearest the originals.
            let max_err = 0.5 / 255.0 + 1e-6;
            assert!(orig.image.mean_abs_diff(&loaded.image) <= max_err);
        }
    }

    #[test]
    fn index_layout_matches_contract() {
        let samples = make_samples();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let text = std::fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("path,class_id"));
        assert_eq!(lines.next(), Some("0/0.png,0"));
        assert!(dir.path().join("0/0.png").is_file());
        assert!(dir.path().join("1/2.png").is_file());
    }

    #[test]
    fn missing_index_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = ingest_gtsrb(dir.path(), 32).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn ingest_accepts_mixed_ppm_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("0")).unwrap();
        std::fs::create_dir_all(root.join("1")).unwrap();
        let img = ImageTensor::filled(24, [0.25, 0.5, 0.75]);
        let mut rows = Vec::new();
        for i in 0..5 {
            let rel = format!("0/{i}.png");
            img.save_png(&root.join(&rel)).unwrap();
            rows.push((rel, 0u32));
        }
        for i in 0..5 {
            // PPM payloads, written through the same codec library.
            let rel = format!("1/{i}.ppm");
            let mut rgb = image::RgbImage::new(24, 24);
            for px in rgb.pixels_mut() {
                *px = image::Rgb([10 * (i as u8 + 1), 100, 200]);
            }
            rgb.save(root.join(&rel)).unwrap();
            rows.push((rel, 1u32));
        }
        let mut writer = csv::Writer::from_path(root.join(LABELS_FILE)).unwrap();
        for (path, class_id) in &rows {
            writer
                .serialize(IndexRow {
                    path: path.clone(),
                    class_id: *class_id,
                })
                .unwrap();
        }
        writer.flush().unwrap();

        let samples = ingest_gtsrb(root, 32).unwrap();
        assert_eq!(samples.len(), 10);
        let labels: std::collections::BTreeSet<u32> =
            samples.iter().map(|s| s.label).collect();
        assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(samples.iter().all(|s| s.image.size() == 32));
        // Sorted by (class_id, path): all class 0 first.
        assert!(samples[..5].iter().all(|s| s.label == 0));
    }

    #[test]
    fn ingest_rejects_too_many_undecodable_files() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("0")).unwrap();
        let img = ImageTensor::filled(24, [0.1, 0.2, 0.3]);
        let mut writer = csv::Writer::from_path(root.join(LABELS_FILE)).unwrap();
        for i in 0..3 {
            let rel = format!("0/{i}.png");
            if i < 2 {
                img.save_png(&root.join(&rel)).unwrap();
            } else {
                std::fs::write(root.join(&rel), b"not a png").unwrap();
            }
            writer
                .serialize(IndexRow {
                    path: rel,
                    class_id: 0,
                })
                .unwrap();
        }
        writer.flush().unwrap();
        // 1 of 3 undecodable is far over the 1% budget.
        assert!(ingest_gtsrb(root, 32).is_err());
    }
}

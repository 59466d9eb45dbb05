//! Six-experiment evaluation matrix and run artifacts.
//!
//! The matrix crosses three training sources (original, mixed, augmented)
//! with two test sources (original, augmented) to separate what degradation
//! costs a clean-trained model from what augmentation buys back:
//!
//!   1 (orig, orig)   2 (orig, aug)   3 (orig+aug, orig)
//!   4 (orig+aug, aug)   5 (aug, orig)   6 (aug, aug)
//!
//! "aug" splits come from the oracle degradations at per-sample severities,
//! so the matrix measures robustness independently of the style-transfer
//! path. Reports are macro-averaged over classes, averaged over seeds, and
//! written atomically (temp file + rename) so a rerun never leaves stale
//! rows behind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_degradation, synthesize_dataset, DegradationKind, DegradationRecipe, LabeledSample,
    Origin, SignClassSpec,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{evaluate_model, MetricsReport};
use crate::rng;
use crate::vpe::{train_vpe, PrototypeCatalog, VpeParams};

pub mod config;

pub use config::{apply_seed_override, PipelineConfig};

/// Where an experiment's training data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSource {
    Orig,
    OrigPlusAug,
    Aug,
}

impl fmt::Display for TrainSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainSource::Orig => "orig",
            TrainSource::OrigPlusAug => "orig_plus_aug",
            TrainSource::Aug => "aug",
        })
    }
}

/// Which test split an experiment evaluates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSource {
    Orig,
    Aug,
}

impl fmt::Display for TestSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestSource::Orig => "orig",
            TestSource::Aug => "aug",
        })
    }
}

/// One cell of the experiment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: u8,
    pub train_source: TrainSource,
    pub test_source: TestSource,
}

/// The fixed six-experiment matrix, in id order.
pub const EXPERIMENT_MATRIX: [ExperimentSpec; 6] = [
    ExperimentSpec { id: 1, train_source: TrainSource::Orig, test_source: TestSource::Orig },
    ExperimentSpec { id: 2, train_source: TrainSource::Orig, test_source: TestSource::Aug },
    ExperimentSpec { id: 3, train_source: TrainSource::OrigPlusAug, test_source: TestSource::Orig },
    ExperimentSpec { id: 4, train_source: TrainSource::OrigPlusAug, test_source: TestSource::Aug },
    ExperimentSpec { id: 5, train_source: TrainSource::Aug, test_source: TestSource::Orig },
    ExperimentSpec { id: 6, train_source: TrainSource::Aug, test_source: TestSource::Aug },
];

/// Look up a matrix cell by id.
pub fn experiment_spec(id: u8) -> Result<ExperimentSpec> {
    EXPERIMENT_MATRIX
        .iter()
        .find(|s| s.id == id)
        .copied()
        .ok_or_else(|| Error::Config(format!("experiment id {id} outside 1..=6")))
}

/// All four splits one matrix seed runs on, plus the class catalog they
/// share. The augmented splits apply the configured oracle degradation to
/// every sample at a per-sample severity.
#[derive(Clone, Debug)]
pub struct ExperimentDatasets {
    pub specs: Vec<SignClassSpec>,
    pub train_orig: Vec<LabeledSample>,
    pub train_aug: Vec<LabeledSample>,
    pub test_orig: Vec<LabeledSample>,
    pub test_aug: Vec<LabeledSample>,
    pub seed: u64,
}

fn degrade_split(
    samples: &[LabeledSample],
    kind: DegradationKind,
    severity_min: f64,
    severity_max: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let span = severity_max - severity_min;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let severity = severity_min + span * rng::hash_unit(seed, i as u64, 0);
            let recipe = DegradationRecipe::new(kind, severity, rng::derive(seed, "sample", i as u64))?;
            Ok(LabeledSample {
                image: apply_degradation(&s.image, &recipe)?,
                label: s.label,
                origin: Origin::Augmented,
                provenance_seed: recipe.seed,
            })
        })
        .collect()
}

/// Synthesize the four splits for one matrix seed. Train and test draw from
/// disjoint RNG streams, and the augmented variants reuse their clean
/// counterparts sample-for-sample so only the degradation differs.
pub fn build_experiment_datasets(
    config: &PipelineConfig,
    seed: u64,
) -> Result<ExperimentDatasets> {
    config.validate()?;
    let specs = crate::data::default_catalog(config.data.class_count)?;
    let jitter = config.data.jitter;
    let canvas = config.data.canvas;
    let train_orig = synthesize_dataset(
        &specs,
        canvas,
        config.data.per_class_train,
        &jitter,
        rng::derive(seed, "train", 0),
    )?;
    let test_orig = synthesize_dataset(
        &specs,
        canvas,
        config.data.per_class_test,
        &jitter,
        rng::derive(seed, "test", 0),
    )?;
    let h = &config.harness;
    let train_aug = degrade_split(
        &train_orig,
        h.aug_kind,
        h.aug_severity_min,
        h.aug_severity_max,
        rng::derive(seed, "train-aug", 0),
    )?;
    let test_aug = degrade_split(
        &test_orig,
        h.aug_kind,
        h.aug_severity_min,
        h.aug_severity_max,
        rng::derive(seed, "test-aug", 0),
    )?;
    Ok(ExperimentDatasets {
        specs,
        train_orig,
        train_aug,
        test_orig,
        test_aug,
        seed,
    })
}

/// Assemble the training split an experiment runs on. The mixed source is the
/// union of both full splits, matching the equal-size original and augmented
/// training sets of the reference evaluation.
fn training_split(source: TrainSource, datasets: &ExperimentDatasets) -> Vec<LabeledSample> {
    match source {
        TrainSource::Orig => datasets.train_orig.clone(),
        TrainSource::Aug => datasets.train_aug.clone(),
        TrainSource::OrigPlusAug => datasets
            .train_orig
            .iter()
            .chain(datasets.train_aug.iter())
            .cloned()
            .collect(),
    }
}

/// Train one model on the given source. The training seed depends only on
/// the dataset seed and the source, so experiments sharing a training source
/// share the model bit-for-bit.
fn train_for_source(
    source: TrainSource,
    datasets: &ExperimentDatasets,
    config: &PipelineConfig,
) -> Result<(VpeParams<f32>, PrototypeCatalog)> {
    let split = training_split(source, datasets);
    if split.is_empty() {
        return Err(Error::Config(format!(
            "training split for source {source} is empty"
        )));
    }
    let source_tag = match source {
        TrainSource::Orig => 0,
        TrainSource::OrigPlusAug => 1,
        TrainSource::Aug => 2,
    };
    let train_seed = rng::derive(datasets.seed, "experiment-train", source_tag);
    let mut params = VpeParams::new(
        config.data.canvas,
        config.vpe.d_z,
        config.vpe.channels,
        config.data.class_count,
        train_seed,
    )?;
    let mut catalog =
        PrototypeCatalog::render(&datasets.specs, config.data.canvas, config.vpe.d_z)?;
    train_vpe(
        &mut params,
        &mut catalog,
        &split,
        &config.train_config(train_seed),
    )?;
    Ok((params, catalog))
}

fn test_split<'a>(
    source: TestSource,
    datasets: &'a ExperimentDatasets,
) -> Result<&'a [LabeledSample]> {
    let split = match source {
        TestSource::Orig => datasets.test_orig.as_slice(),
        TestSource::Aug => datasets.test_aug.as_slice(),
    };
    if split.is_empty() {
        return Err(Error::Config(format!("test split {source} is empty")));
    }
    Ok(split)
}

/// Run one matrix cell end to end: train on the designated source, evaluate
/// on the designated test split. Fully seeded; identical inputs give
/// identical reports.
pub fn run_experiment(
    spec: ExperimentSpec,
    datasets: &ExperimentDatasets,
    config: &PipelineConfig,
) -> Result<MetricsReport> {
    experiment_spec(spec.id).and_then(|canonical| {
        if canonical != spec {
            return Err(Error::Config(format!(
                "experiment {} does not match the fixed matrix definition",
                spec.id
            )));
        }
        Ok(())
    })?;
    let (params, catalog) = train_for_source(spec.train_source, datasets, config)?;
    evaluate_model(&params, &catalog, test_split(spec.test_source, datasets)?)
}

/// One matrix cell's outcome for one seed.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Run the full matrix across the given seeds. Each seed trains one model
/// per training source and reuses it for both test splits, which is
/// equivalent to running the cells independently because training seeds do
/// not depend on the test source.
pub fn run_matrix(config: &PipelineConfig, seeds: &[u64]) -> Result<Vec<ExperimentResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("matrix run needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(seeds.len() * EXPERIMENT_MATRIX.len());
    for &seed in seeds {
        let datasets = build_experiment_datasets(config, seed)?;
        let mut models: BTreeMap<TrainSource, (VpeParams<f32>, PrototypeCatalog)> =
            BTreeMap::new();
        for spec in EXPERIMENT_MATRIX {
            if !models.contains_key(&spec.train_source) {
                models.insert(
                    spec.train_source,
                    train_for_source(spec.train_source, &datasets, config)?,
                );
            }
            let (params, catalog) = &models[&spec.train_source];
            let report = evaluate_model(params, catalog, test_split(spec.test_source, &datasets)?)?;
            results.push(ExperimentResult { spec, seed, report });
        }
    }
    Ok(results)
}

/// Fixed colormap for confusion heatmaps: a dark-to-bright ramp so fuller
/// cells read brighter. Input is clamped to [0, 1].
pub fn heat_color(t: f64) -> [f32; 3] {
    const ANCHORS: [(f64, [f32; 3]); 4] = [
        (0.00, [0.05, 0.03, 0.14]),
        (0.33, [0.23, 0.30, 0.75]),
        (0.66, [0.91, 0.64, 0.24]),
        (1.00, [0.98, 0.97, 0.44]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in ANCHORS.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let f = ((t - t0) / (t1 - t0)) as f32;
            return [
                c0[0] + (c1[0] - c0[0]) * f,
                c0[1] + (c1[1] - c0[1]) * f,
                c0[2] + (c1[2] - c0[2]) * f,
            ];
        }
    }
    ANCHORS[ANCHORS.len() - 1].1
}

/// Pixels per confusion cell in heatmap renders.
const HEATMAP_CELL: usize = 8;

/// Render a confusion matrix as a per-row-normalized heatmap, so a column
/// that captures errors from many classes shows as a vertical bright block
/// regardless of per-class support.
pub fn render_heatmap(confusion: &Array2<u64>) -> Result<ImageTensor> {
    let (rows, cols) = confusion.dim();
    if rows != cols || rows == 0 {
        return Err(Error::Shape(format!(
            "confusion matrix {rows}x{cols} is not square and non-empty"
        )));
    }
    let mut img = ImageTensor::zeros(rows * HEATMAP_CELL);
    for i in 0..rows {
        let row_max = (0..cols).map(|j| confusion[[i, j]]).max().unwrap_or(0);
        for j in 0..cols {
            let t = if row_max == 0 {
                0.0
            } else {
                confusion[[i, j]] as f64 / row_max as f64
            };
            let rgb = heat_color(t);
            for dy in 0..HEATMAP_CELL {
                for dx in 0..HEATMAP_CELL {
                    img.set_pixel(i * HEATMAP_CELL + dy, j * HEATMAP_CELL + dx, rgb);
                }
            }
        }
    }
    Ok(img)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-experiment aggregate over seeds: scalar means plus the summed
/// confusion matrix.
struct Aggregate {
    spec: ExperimentSpec,
    precision: f64,
    recall: f64,
    f1: f64,
    accuracy: f64,
    confusion: Array2<u64>,
}

fn aggregate(results: &[ExperimentResult]) -> Result<Vec<Aggregate>> {
    let mut by_id: BTreeMap<u8, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        by_id.entry(r.spec.id).or_default().push(r);
    }
    let expected_ids: Vec<u8> = EXPERIMENT_MATRIX.iter().map(|s| s.id).collect();
    let got_ids: Vec<u8> = by_id.keys().copied().collect();
    if got_ids != expected_ids {
        return Err(Error::Contract(format!(
            "summary needs all six experiments; got ids {got_ids:?}"
        )));
    }

    // Every experiment must cover the same seeds, or the averages would not
    // be comparable across rows.
    let mut seed_sets: Vec<Vec<u64>> = Vec::new();
    for rs in by_id.values() {
        let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate seed within one experiment".into()));
        }
        seed_sets.push(seeds);
    }
    if seed_sets.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Contract(
            "experiments ran with different seed sets; refusing to summarize".into(),
        ));
    }

    by_id
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.seed);
            let spec = experiment_spec(rs[0].spec.id)?;
            for r in &rs {
                if r.spec != spec {
                    return Err(Error::Contract(format!(
                        "experiment {} recorded with inconsistent sources",
                        spec.id
                    )));
                }
            }
            let n = rs.len() as f64;
            let dim = rs[0].report.confusion.dim();
            let mut confusion = Array2::<u64>::zeros(dim);
            for r in &rs {
                if r.report.confusion.dim() != dim {
                    return Err(Error::Contract(
                        "confusion matrices of one experiment differ in shape".into(),
                    ));
                }
                confusion += &r.report.confusion;
            }
            Ok(Aggregate {
                spec,
                precision: rs.iter().map(|r| r.report.precision).sum::<f64>() / n,
                recall: rs.iter().map(|r| r.report.recall).sum::<f64>() / n,
                f1: rs.iter().map(|r| r.report.f1).sum::<f64>() / n,
                accuracy: rs.iter().map(|r| r.report.accuracy).sum::<f64>() / n,
                confusion,
            })
        })
        .collect()
}

/// Write `summary.csv`, per-experiment confusion CSVs, and heatmap PNGs into
/// the run directory. Refuses to emit unless all six experiments are present
/// with identical seed sets. All text artifacts are replaced atomically.
pub fn emit_report(results: &[ExperimentResult], run_dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Validation("no experiment results to report".into()));
    }
    let aggregates = aggregate(results)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let mut summary = String::from("exp,train,test,precision,recall,f1,accuracy\n");
    for a in &aggregates {
        summary.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            a.spec.id, a.spec.train_source, a.spec.test_source, a.precision, a.recall, a.f1,
            a.accuracy
        ));
    }
    write_atomic(&run_dir.join("summary.csv"), &summary)?;

    for a in &aggregates {
        let mut csv = String::new();
        for row in a.confusion.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        write_atomic(&run_dir.join(format!("confusion_{}.csv", a.spec.id)), &csv)?;
        render_heatmap(&a.confusion)?
            .save_png(&run_dir.join(format!("confusion_{}.png", a.spec.id)))?;
    }
    Ok(())
}

/// Create a fresh `runs/<timestamp>-<seed>/` directory under `root`. A
/// same-second collision gets a numeric suffix, so the directory is always
/// newly created (the audit trail is append-only).
pub fn fresh_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let runs = root.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let base = format!("{stamp}-{seed}");
    for attempt in 0..1000u32 {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}.{attempt}")
        };
        let dir = runs.join(&name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    Err(Error::Config("could not allocate a fresh run directory".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn matrix_is_exactly_the_six_required_pairs() {
        let pairs: Vec<(u8, TrainSource, TestSource)> = EXPERIMENT_MATRIX
            .iter()
            .map(|s| (s.id, s.train_source, s.test_source))
            .collect();
        assert_eq!(
            pairs,
            vec![
                (1, TrainSource::Orig, TestSource::Orig),
                (2, TrainSource::Orig, TestSource::Aug),
                (3, TrainSource::OrigPlusAug, TestSource::Orig),
                (4, TrainSource::OrigPlusAug, TestSource::Aug),
                (5, TrainSource::Aug, TestSource::Orig),
                (6, TrainSource::Aug, TestSource::Aug),
            ]
        );
        assert_eq!(experiment_spec(4).unwrap().train_source, TrainSource::OrigPlusAug);
        assert_eq!(experiment_spec(7).unwrap_err().exit_code(), 2);
    }

    fn micro_config() -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.data.class_count = 2;
        config.data.canvas = 16;
        config.data.per_class_train = 8;
        config.data.per_class_test = 4;
        config.vpe.d_z = 4;
        config.vpe.channels = [6, 8, 10];
        config.vpe.epochs = 4;
        config.vpe.batch_size = 8;
        config.harness.seeds = vec![0];
        config
    }

    fn fake_report(f1: f64, confusion: Array2<u64>) -> MetricsReport {
        crate::metrics::compute_metrics(&confusion).map(|mut r| {
            // Nudge one scalar so rows are distinguishable in asserts.
            r.f1 = f1;
            r
        })
        .unwrap()
    }

    fn fake_results(seeds: &[u64]) -> Vec<ExperimentResult> {
        let mut out = Vec::new();
        for &seed in seeds {
            for spec in EXPERIMENT_MATRIX {
                let confusion = arr2(&[[8u64, 2], [1, 9]]);
                out.push(ExperimentResult {
                    spec,
                    seed,
                    report: fake_report(0.1 * f64::from(spec.id), confusion),
                });
            }
        }
        out
    }

    #[test]
    fn summary_refuses_incomplete_or_mismatched_matrices() {
        let dir = tempfile::tempdir().unwrap();
        let mut missing = fake_results(&[0]);
        missing.retain(|r| r.spec.id != 3);
        assert_eq!(emit_report(&missing, dir.path()).unwrap_err().exit_code(), 2);

        let mut uneven = fake_results(&[0, 1]);
        uneven.retain(|r| !(r.spec.id == 5 && r.seed == 1));
        assert_eq!(emit_report(&uneven, dir.path()).unwrap_err().exit_code(), 2);

        let mut duped = fake_results(&[0]);
        duped.push(duped[0].clone());
        assert_eq!(emit_report(&duped, dir.path()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn summary_has_seven_lines_and_round_trips_to_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let results = fake_results(&[0, 1]);
        emit_report(&results, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "exp,train,test,precision,recall,f1,accuracy");
        for (row, spec) in lines[1..].iter().zip(EXPERIMENT_MATRIX) {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields[0], spec.id.to_string());
            assert_eq!(fields[1], spec.train_source.to_string());
            assert_eq!(fields[2], spec.test_source.to_string());
            let f1: f64 = fields[5].parse().unwrap();
            assert_abs_diff_eq!(f1, 0.1 * f64::from(spec.id), epsilon = 5e-5);
        }

        // Re-emitting replaces files with no stale rows.
        emit_report(&fake_results(&[3]), dir.path()).unwrap();
        let text2 = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text2.lines().count(), 7);

        // Confusion CSV carries the seed-summed integer matrix.
        let conf = fs::read_to_string(dir.path().join("confusion_1.csv")).unwrap();
        assert_eq!(conf, "8,2\n1,9\n");
    }

    #[test]
    fn heatmap_normalizes_per_row_with_the_fixed_colormap() {
        let confusion = arr2(&[[10u64, 0, 0], [30, 30, 0], [0, 0, 0]]);
        let img = render_heatmap(&confusion).unwrap();
        assert_eq!(img.size(), 3 * HEATMAP_CELL);
        let bright = heat_color(1.0);
        let dark = heat_color(0.0);
        // Row 0: only the diagonal cell is bright.
        assert_eq!(img.pixel(0, 0), bright);
        assert_eq!(img.pixel(0, HEATMAP_CELL), dark);
        // Row 1: two equal maxima are both bright despite different totals
        // than row 0 (per-row normalization).
        assert_eq!(img.pixel(HEATMAP_CELL, 0), bright);
        assert_eq!(img.pixel(HEATMAP_CELL, HEATMAP_CELL), bright);
        // Row 2 is all zeros and renders dark.
        assert_eq!(img.pixel(2 * HEATMAP_CELL, 2 * HEATMAP_CELL), dark);

        let not_square = Array2::<u64>::zeros((2, 3));
        assert_eq!(render_heatmap(&not_square).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn micro_matrix_runs_all_six_cells_deterministically() {
        let config = micro_config();
        let results = run_matrix(&config, &[0]).unwrap();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.report.accuracy >= 0.0 && r.report.accuracy <= 1.0);
            assert!(r.report.f1 >= 0.0 && r.report.f1 <= 1.0);
        }

        let again = run_matrix(&config, &[0]).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        emit_report(&results, dir_a.path()).unwrap();
        emit_report(&again, dir_b.path()).unwrap();
        let a = fs::read(dir_a.path().join("summary.csv")).unwrap();
        let b = fs::read(dir_b.path().join("summary.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_cell_run_matches_the_matrix_path() {
        let config = micro_config();
        let datasets = build_experiment_datasets(&config, 0).unwrap();
        let spec = experiment_spec(4).unwrap();
        let single = run_experiment(spec, &datasets, &config).unwrap();
        let matrix = run_matrix(&config, &[0]).unwrap();
        let from_matrix = matrix
            .iter()
            .find(|r| r.spec.id == 4)
            .map(|r| &r.report)
            .unwrap();
        assert_eq!(single.confusion, from_matrix.confusion);
        assert_eq!(single.f1.to_bits(), from_matrix.f1.to_bits());
    }

    #[test]
    fn augmented_splits_share_labels_with_their_clean_counterparts() {
        let config = micro_config();
        let datasets = build_experiment_datasets(&config, 1).unwrap();
        assert_eq!(datasets.train_orig.len(), datasets.train_aug.len());
        assert_eq!(datasets.test_orig.len(), datasets.test_aug.len());
        for (clean, aug) in datasets.train_orig.iter().zip(&datasets.train_aug) {
            assert_eq!(clean.label, aug.label);
            assert_eq!(aug.origin, Origin::Augmented);
            assert_ne!(clean.image, aug.image);
        }
    }

    #[test]
    fn fresh_run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = fresh_run_dir(root.path(), 7).unwrap();
        let b = fresh_run_dir(root.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        assert!(a.starts_with(root.path().join("runs")));
    }
}

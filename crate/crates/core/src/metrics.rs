//! Confusion-matrix metrics: macro precision/recall/F1, micro accuracy,
//! catch-all column detection, and top confused class pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::ops::softmax_rows;
use crate::vpe::{EncodeMode, PrototypeCatalog, VpeParams};

/// Per-class scores; `support` is the true count of the class in the test
/// set (row sum).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Scalar summary plus the per-class table and raw confusion counts.
/// Precision/recall/F1 are macro-averaged over classes; accuracy is micro
/// (trace over total).
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Array2<u64>,
}

/// Compute the metric suite from a K×K confusion matrix with rows = true
/// class, columns = predicted class. Zero-denominator classes score 0 and
/// are logged.
pub fn compute_metrics(confusion: &Array2<u64>) -> Result<MetricsReport> {
    compute_metrics_labeled(confusion, None)
}

/// Like `compute_metrics`, with explicit class ids for the rows/columns
/// (defaults to 0..K).
pub fn compute_metrics_labeled(
    confusion: &Array2<u64>,
    class_ids: Option<&[u32]>,
) -> Result<MetricsReport> {
    let (rows, cols) = confusion.dim();
    if rows != cols || rows == 0 {
        return Err(Error::Shape(format!(
            "confusion matrix must be square and non-empty, got {rows}x{cols}"
        )));
    }
    if let Some(ids) = class_ids {
        if ids.len() != rows {
            return Err(Error::Shape(format!(
                "{} class ids supplied for a {rows}-class matrix",
                ids.len()
            )));
        }
    }
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return Err(Error::Validation(
            "confusion matrix is all zero; nothing was evaluated".into(),
        ));
    }
    let k = rows;
    let mut per_class = Vec::with_capacity(k);
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f1 = 0.0;
    let mut trace = 0u64;
    for c in 0..k {
        let class_id = class_ids.map_or(c as u32, |ids| ids[c]);
        let diag = confusion[[c, c]];
        trace += diag;
        let row_sum: u64 = confusion.row(c).iter().sum();
        let col_sum: u64 = confusion.column(c).iter().sum();
        let precision = if col_sum == 0 {
            log::warn!("class {class_id} never predicted; precision set to 0");
            0.0
        } else {
            diag as f64 / col_sum as f64
        };
        let recall = if row_sum == 0 {
            log::warn!("class {class_id} absent from the test set; recall set to 0");
            0.0
        } else {
            diag as f64 / row_sum as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        macro_p += precision;
        macro_r += recall;
        macro_f1 += f1;
        per_class.push(ClassMetrics {
            class_id,
            precision,
            recall,
            f1,
            support: row_sum,
        });
    }
    Ok(MetricsReport {
        precision: macro_p / k as f64,
        recall: macro_r / k as f64,
        f1: macro_f1 / k as f64,
        accuracy: trace as f64 / total as f64,
        per_class,
        confusion: confusion.clone(),
    })
}

/// Classes that soak up a disproportionate share of all misclassifications:
/// off-diagonal column mass above `mass_threshold`, sorted by mass
/// descending (ties by class index ascending).
pub fn detect_catch_all(confusion: &Array2<u64>, mass_threshold: f64) -> Vec<(usize, f64)> {
    let (rows, cols) = confusion.dim();
    debug_assert_eq!(rows, cols);
    let mut off_diag_total = 0u64;
    let mut column_mass = vec![0u64; cols];
    for r in 0..rows {
        for c in 0..cols {
            if r != c {
                off_diag_total += confusion[[r, c]];
                column_mass[c] += confusion[[r, c]];
            }
        }
    }
    if off_diag_total == 0 {
        return Vec::new();
    }
    let mut hits: Vec<(usize, f64)> = column_mass
        .iter()
        .enumerate()
        .filter_map(|(c, &m)| {
            let mass = m as f64 / off_diag_total as f64;
            (mass > mass_threshold).then_some((c, mass))
        })
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    hits
}

/// The `top_k` largest off-diagonal confusion cells as
/// (true_class, predicted_class, count), ties broken by (row, col).
pub fn confusion_pairs(confusion: &Array2<u64>, top_k: usize) -> Vec<(usize, usize, u64)> {
    let (rows, cols) = confusion.dim();
    let mut cells: Vec<(usize, usize, u64)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if r != c && confusion[[r, c]] > 0 {
                cells.push((r, c, confusion[[r, c]]));
            }
        }
    }
    cells.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    cells.truncate(top_k);
    cells
}

/// Run the classifier over labeled samples and tally the confusion matrix.
/// Rows/columns follow the catalog's class order.
pub fn confusion_from_model(
    params: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
    samples: &[crate::data::LabeledSample],
) -> Result<Array2<u64>> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    let k = catalog.class_count();
    let index_of = |class_id: u32| -> Result<usize> {
        catalog
            .entries
            .iter()
            .position(|e| e.class_id == class_id)
            .ok_or_else(|| Error::Validation(format!("label {class_id} not in catalog")))
    };
    let mut confusion = Array2::<u64>::zeros((k, k));
    for chunk in samples.chunks(256) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let codes = params.encode_batch(&images, EncodeMode::Mean)?;
        let probs = softmax_rows(&params.head.forward(&codes));
        for (sample, prow) in chunk.iter().zip(probs.rows()) {
            let truth = index_of(sample.label)?;
            let mut arg = 0usize;
            let mut best = f32::NEG_INFINITY;
            for (i, &p) in prow.iter().enumerate() {
                if p > best {
                    best = p;
                    arg = i;
                }
            }
            confusion[[truth, arg]] += 1;
        }
    }
    Ok(confusion)
}

/// Convenience wrapper: evaluate a model on samples and summarize.
pub fn evaluate_model(
    params: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
    samples: &[crate::data::LabeledSample],
) -> Result<MetricsReport> {
    let confusion = confusion_from_model(params, catalog, samples)?;
    let ids: Vec<u32> = catalog.entries.iter().map(|e| e.class_id).collect();
    compute_metrics_labeled(&confusion, Some(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn perfect_classifier_scores_ones() {
        let m = arr2(&[[10u64, 0], [0, 10]]);
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn two_class_example_matches_hand_computation() {
        let m = arr2(&[[8u64, 2], [1, 9]]);
        let r = compute_metrics(&m).unwrap();
        assert!((r.accuracy - 0.85).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.8).abs() < 1e-12);
        assert!((r.per_class[1].recall - 0.9).abs() < 1e-12);
        assert!((r.recall - 0.85).abs() < 1e-12);
        assert!((r.per_class[0].precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class[1].precision - 9.0 / 11.0).abs() < 1e-12);
        assert!((r.precision - (8.0 / 9.0 + 9.0 / 11.0) / 2.0).abs() < 1e-12);
        let f1_0 = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        let f1_1 = 2.0 * (9.0 / 11.0) * 0.9 / (9.0 / 11.0 + 0.9);
        assert!((r.f1 - (f1_0 + f1_1) / 2.0).abs() < 1e-12);
        assert_eq!(r.per_class[0].support, 10);
    }

    #[test]
    fn empty_column_zeroes_only_that_class() {
        // Class 2 never predicted; its precision is 0, class 0/1 unaffected.
        let m = arr2(&[[5u64, 0, 0], [0, 5, 0], [3, 2, 0]]);
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.per_class[2].precision, 0.0);
        assert_eq!(r.per_class[2].recall, 0.0);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.per_class[0].recall - 1.0).abs() < 1e-12);
        assert!((r.per_class[0].precision - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.per_class[1].precision - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_matrix_is_a_validation_error() {
        let m = Array2::<u64>::zeros((3, 3));
        let err = compute_metrics(&m).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_square_matrix_is_rejected() {
        let m = Array2::<u64>::zeros((2, 3));
        assert!(matches!(
            compute_metrics(&m).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn catch_all_finds_the_planted_column() {
        // 20 total errors, 8 of them land in column 3: mass 0.40.
        let mut m = Array2::<u64>::zeros((5, 5));
        for c in 0..5 {
            m[[c, c]] = 10;
        }
        m[[0, 3]] = 5;
        m[[1, 3]] = 3;
        m[[0, 1]] = 4;
        m[[2, 4]] = 4;
        m[[4, 0]] = 4;
        let hits = detect_catch_all(&m, 0.15);
        let classes: Vec<usize> = hits.iter().map(|h| h.0).collect();
        assert_eq!(classes, vec![3, 0, 1, 4]);
        assert!((hits[0].1 - 0.40).abs() < 1e-12);
        // A tighter threshold isolates the planted column.
        assert_eq!(detect_catch_all(&m, 0.25).len(), 1);
        assert!(detect_catch_all(&m, 1.0).is_empty());
        let diag = arr2(&[[7u64, 0], [0, 7]]);
        assert!(detect_catch_all(&diag, 0.15).is_empty());
    }

    #[test]
    fn confusion_pairs_basics() {
        let diag = arr2(&[[7u64, 0], [0, 7]]);
        assert!(confusion_pairs(&diag, 5).is_empty());
        let mut m = Array2::<u64>::zeros((34, 34));
        m[[6, 32]] = 5;
        assert_eq!(confusion_pairs(&m, 3), vec![(6, 32, 5)]);
    }

    #[test]
    fn confusion_pairs_match_exhaustive_sort_oracle() {
        for seed in 0..5u64 {
            let k = 6;
            let m = Array2::from_shape_fn((k, k), |(r, c)| {
                (crate::rng::hash3(seed, r as u64, c as u64) % 9) as u64
            });
            let got = confusion_pairs(&m, 10);
            let mut oracle: Vec<(usize, usize, u64)> = Vec::new();
            for r in 0..k {
                for c in 0..k {
                    if r != c && m[[r, c]] > 0 {
                        oracle.push((r, c, m[[r, c]]));
                    }
                }
            }
            oracle.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            oracle.truncate(10);
            assert_eq!(got, oracle);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn metric_bounds_and_accuracy_identity(
            cells in prop::collection::vec(0u64..50, 9),
        ) {
            let m = Array2::from_shape_vec((3, 3), cells).unwrap();
            if m.iter().sum::<u64>() == 0 {
                prop_assert!(compute_metrics(&m).is_err());
            } else {
                let r = compute_metrics(&m).unwrap();
                for v in [r.precision, r.recall, r.f1, r.accuracy] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let total: u64 = m.iter().sum();
                let trace: u64 = (0..3).map(|i| m[[i, i]]).sum();
                prop_assert!((r.accuracy * total as f64 - trace as f64).abs() < 1e-9);
            }
        }
    }
}

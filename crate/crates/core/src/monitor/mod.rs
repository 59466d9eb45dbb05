//! Novelty monitor: scores observations by latent distance to the nearest
//! class centroid and by classifier confidence, flags unfamiliar inputs, and
//! keeps them in a bounded FIFO buffer for later augmentation.
//!
//! Thresholds come from a grid search on a held-out clean split against
//! synthetic unknowns, maximizing the flagging F1.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::ops::softmax_rows;
use crate::vpe::{EncodeMode, LatentCode, PrototypeCatalog, VpeParams};

pub const DEFAULT_BUFFER_CAPACITY: usize = 256;

/// Decision thresholds: flag when distance exceeds `tau_d` or confidence
/// falls below `tau_y` (both strict).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_d: f64,
    pub tau_y: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !self.tau_d.is_finite() || self.tau_d <= 0.0 {
            return Err(Error::Validation(format!(
                "tau_d {} must be finite and positive",
                self.tau_d
            )));
        }
        if !self.tau_y.is_finite() || self.tau_y <= 0.0 || self.tau_y >= 1.0 {
            return Err(Error::Validation(format!(
                "tau_y {} must lie strictly inside (0, 1)",
                self.tau_y
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("threshold serialization: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }
}

/// Which condition(s) flagged an observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    None,
    Distance,
    Confidence,
    Both,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Trigger::None => "none",
            Trigger::Distance => "distance",
            Trigger::Confidence => "confidence",
            Trigger::Both => "both",
        };
        f.write_str(s)
    }
}

/// Outcome of judging one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionVerdict {
    pub predicted_label: u32,
    /// Class of the nearest centroid; the pseudo-label used when a flagged
    /// observation is later turned into augmentation targets.
    pub nearest_class: u32,
    /// Max component of the softmax output.
    pub confidence: f64,
    /// Distance to the nearest class centroid.
    pub distance: f64,
    pub flagged: bool,
    pub trigger: Trigger,
}

impl DetectionVerdict {
    /// `flagged` is derived from the trigger so the two can never disagree.
    pub fn new(
        predicted_label: u32,
        nearest_class: u32,
        confidence: f64,
        distance: f64,
        trigger: Trigger,
    ) -> Self {
        Self {
            predicted_label,
            nearest_class,
            confidence,
            distance,
            flagged: trigger != Trigger::None,
            trigger,
        }
    }
}

fn l2_f64(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two latent codes, accumulated in f64.
pub fn code_distance(a: &LatentCode, b: &LatentCode) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "code dimensions {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(l2_f64(a.view(), b.view()))
}

/// Distance to the nearest centroid and its class; ties go to the smallest
/// class id.
pub fn latent_distance(code: &LatentCode, catalog: &PrototypeCatalog) -> Result<(f64, u32)> {
    if catalog.entries.is_empty() {
        return Err(Error::Config("prototype catalog is empty".into()));
    }
    let mut best_d = f64::INFINITY;
    let mut best_c = u32::MAX;
    for entry in &catalog.entries {
        if entry.centroid.len() != code.len() {
            return Err(Error::Shape(format!(
                "centroid dimension {} does not match code dimension {}",
                entry.centroid.len(),
                code.len()
            )));
        }
        let d = l2_f64(code.view(), entry.centroid.view());
        if d < best_d || (d == best_d && entry.class_id < best_c) {
            best_d = d;
            best_c = entry.class_id;
        }
    }
    Ok((best_d, best_c))
}

/// Apply the flag rule to precomputed scores. Both comparisons are strict:
/// an observation exactly at a threshold is familiar.
pub fn would_flag(distance: f64, confidence: f64, thresholds: &Thresholds) -> Trigger {
    let by_distance = distance > thresholds.tau_d;
    let by_confidence = confidence < thresholds.tau_y;
    match (by_distance, by_confidence) {
        (false, false) => Trigger::None,
        (true, false) => Trigger::Distance,
        (false, true) => Trigger::Confidence,
        (true, true) => Trigger::Both,
    }
}

/// Model-derived scores for one observation, before thresholding.
#[derive(Clone, Copy, Debug)]
pub struct Scored {
    pub distance: f64,
    pub nearest_class: u32,
    pub confidence: f64,
    pub predicted_label: u32,
}

/// Score a batch: latent distance to the nearest centroid plus the linear
/// head's argmax and confidence.
pub fn score_batch(
    params: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
    images: &[&ImageTensor],
) -> Result<Vec<Scored>> {
    if catalog.class_count() != params.class_count() {
        return Err(Error::Contract(format!(
            "catalog has {} classes but the head expects {}",
            catalog.class_count(),
            params.class_count()
        )));
    }
    if catalog.version != params.version {
        return Err(Error::Contract(format!(
            "catalog centroids from encoder version {} used with version {}",
            catalog.version, params.version
        )));
    }
    let codes = params.encode_batch(images, EncodeMode::Mean)?;
    let probs = softmax_rows(&params.head.forward(&codes));
    let mut out = Vec::with_capacity(images.len());
    for (code, prow) in codes.rows().into_iter().zip(probs.rows()) {
        let (distance, nearest_class) = latent_distance(&code.to_owned(), catalog)?;
        let mut arg = 0usize;
        let mut best = f32::NEG_INFINITY;
        for (i, &p) in prow.iter().enumerate() {
            if p > best {
                best = p;
                arg = i;
            }
        }
        out.push(Scored {
            distance,
            nearest_class,
            confidence: f64::from(best),
            predicted_label: catalog.entries[arg].class_id,
        });
    }
    Ok(out)
}

/// Score one observation and apply the flag rule.
pub fn judge(
    image: &ImageTensor,
    params: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
    thresholds: &Thresholds,
) -> Result<DetectionVerdict> {
    thresholds.validate()?;
    let scored = score_batch(params, catalog, &[image])?.remove(0);
    let trigger = would_flag(scored.distance, scored.confidence, thresholds);
    Ok(DetectionVerdict::new(
        scored.predicted_label,
        scored.nearest_class,
        scored.confidence,
        scored.distance,
        trigger,
    ))
}

/// Nearest-rank percentile of an unsorted sample (p in 1..=100).
fn nearest_rank_percentile(values: &mut [f64], p: usize) -> f64 {
    debug_assert!((1..=100).contains(&p) && !values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p * values.len()).div_ceil(100).max(1);
    values[rank - 1]
}

/// Calibration result: the selected thresholds plus how they scored.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationOutcome {
    pub thresholds: Thresholds,
    /// Flagging F1 (unknowns = positives) at the selected pair.
    pub f1: f64,
    /// True when no grid pair flagged any unknown and the fallback pair
    /// (99th-percentile tau_d, tau_y = 0.5) was returned.
    pub degenerate: bool,
}

/// Grid search over (distance, confidence) score pairs.
///
/// tau_d candidates are the 50th..99th nearest-rank percentiles of the clean
/// distances; tau_y candidates are 0.10..0.90 in steps of 0.05. The pair with
/// maximal flagging F1 wins; ties prefer the smaller tau_d, then the larger
/// tau_y.
pub fn calibrate_from_scores(
    clean: &[(f64, f64)],
    unknown: &[(f64, f64)],
) -> Result<CalibrationOutcome> {
    if clean.is_empty() || unknown.is_empty() {
        return Err(Error::Validation(
            "calibration needs non-empty clean and unknown score sets".into(),
        ));
    }
    let mut clean_d: Vec<f64> = clean.iter().map(|&(d, _)| d).collect();
    let tau_d_grid: Vec<f64> = (50..=99)
        .map(|p| nearest_rank_percentile(&mut clean_d, p).max(1e-12))
        .collect();
    let tau_y_grid: Vec<f64> = (2..=18).map(|i| i as f64 * 0.05).collect();

    let mut best: Option<(f64, Thresholds)> = None;
    let mut any_flagged = false;
    for &tau_d in &tau_d_grid {
        for &tau_y in &tau_y_grid {
            let t = Thresholds { tau_d, tau_y };
            let tp = unknown
                .iter()
                .filter(|&&(d, c)| would_flag(d, c, &t) != Trigger::None)
                .count();
            let fp = clean
                .iter()
                .filter(|&&(d, c)| would_flag(d, c, &t) != Trigger::None)
                .count();
            let fne = unknown.len() - tp;
            any_flagged |= tp > 0;
            let f1 = if 2 * tp + fp + fne == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fne) as f64
            };
            let replace = match &best {
                None => true,
                Some((bf, bt)) => {
                    f1 > *bf
                        || (f1 == *bf
                            && (tau_d < bt.tau_d || (tau_d == bt.tau_d && tau_y > bt.tau_y)))
                }
            };
            if replace {
                best = Some((f1, t));
            }
        }
    }
    if !any_flagged {
        log::warn!(
            "threshold calibration degenerate: no grid pair flags any unknown; \
             falling back to the 99th-percentile distance and tau_y = 0.5"
        );
        let tau_d = nearest_rank_percentile(&mut clean_d, 99).max(1e-12);
        return Ok(CalibrationOutcome {
            thresholds: Thresholds { tau_d, tau_y: 0.5 },
            f1: 0.0,
            degenerate: true,
        });
    }
    let (f1, thresholds) = best.expect("non-empty grid");
    Ok(CalibrationOutcome {
        thresholds,
        f1,
        degenerate: false,
    })
}

/// Score a clean validation split and a synthetic-unknown set with the
/// current model, then grid-search thresholds on those scores.
pub fn calibrate_thresholds(
    clean_validation: &[crate::data::LabeledSample],
    synthetic_unknowns: &[ImageTensor],
    params: &VpeParams<f32>,
    catalog: &PrototypeCatalog,
) -> Result<CalibrationOutcome> {
    if clean_validation.is_empty() || synthetic_unknowns.is_empty() {
        return Err(Error::Validation(
            "calibration needs non-empty clean and unknown sets".into(),
        ));
    }
    let clean_imgs: Vec<&ImageTensor> = clean_validation.iter().map(|s| &s.image).collect();
    let unknown_imgs: Vec<&ImageTensor> = synthetic_unknowns.iter().collect();
    let clean: Vec<(f64, f64)> = score_batch(params, catalog, &clean_imgs)?
        .iter()
        .map(|s| (s.distance, s.confidence))
        .collect();
    let unknown: Vec<(f64, f64)> = score_batch(params, catalog, &unknown_imgs)?
        .iter()
        .map(|s| (s.distance, s.confidence))
        .collect();
    let outcome = calibrate_from_scores(&clean, &unknown)?;
    log::info!(
        "calibrated thresholds tau_d={:.6} tau_y={:.2} (flagging F1 {:.3})",
        outcome.thresholds.tau_d,
        outcome.thresholds.tau_y,
        outcome.f1
    );
    Ok(outcome)
}

/// One operator-warning record, serialized as a JSON line per flagged input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub seq: u64,
    pub distance: f64,
    pub confidence: f64,
    pub predicted_label: u32,
    pub trigger: Trigger,
}

/// Append events to a JSON-lines log.
pub fn append_events(path: &Path, events: &[MonitorEvent]) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for event in events {
        let line = serde_json::to_string(event)
            .map_err(|e| Error::Data(format!("event serialization: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<MonitorEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// A flagged observation waiting for augmentation. `seq` is the monotone
/// arrival index, which doubles as a logical timestamp.
#[derive(Clone, Debug)]
pub struct BufferedUnknown {
    pub image: ImageTensor,
    pub verdict: DetectionVerdict,
    pub seq: u64,
}

/// Bounded FIFO of flagged observations. Single writer; drain hands the
/// entries to the caller and empties the buffer.
#[derive(Clone, Debug)]
pub struct UnknownBuffer {
    entries: VecDeque<BufferedUnknown>,
    capacity: usize,
    next_seq: u64,
}

impl Default for UnknownBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_BUFFER_CAPACITY).expect("default capacity is positive")
    }
}

impl UnknownBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            entries: VecDeque::new(),
            capacity,
            next_seq: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of observations ever pushed.
    pub fn seen(&self) -> u64 {
        self.next_seq
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferedUnknown> {
        self.entries.iter()
    }

    /// Store a flagged observation, evicting the oldest entry when full.
    /// Returns the operator-warning event for the append-only log.
    pub fn push(&mut self, image: ImageTensor, verdict: DetectionVerdict) -> Result<MonitorEvent> {
        if !verdict.flagged {
            return Err(Error::Contract(
                "only flagged observations may enter the unknown buffer".into(),
            ));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(BufferedUnknown {
            image,
            verdict,
            seq,
        });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        log::warn!(
            "unfamiliar input {seq}: distance {:.4}, confidence {:.4}, trigger {}",
            verdict.distance,
            verdict.confidence,
            verdict.trigger
        );
        Ok(MonitorEvent {
            seq,
            distance: verdict.distance,
            confidence: verdict.confidence,
            predicted_label: verdict.predicted_label,
            trigger: verdict.trigger,
        })
    }

    /// Remove and return all entries in arrival order.
    pub fn drain(&mut self) -> Vec<BufferedUnknown> {
        let entries: Vec<BufferedUnknown> = std::mem::take(&mut self.entries).into();
        log::warn!("draining {} buffered unknowns for augmentation", entries.len());
        entries
    }
}

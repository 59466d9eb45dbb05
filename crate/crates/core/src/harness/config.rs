//! Pipeline configuration: one TOML document with a section per stage, every
//! default written out explicitly so a run directory's config snapshot fully
//! describes the run. Unknown keys are rejected rather than silently
//! ignored, and absent keys fall back to the defaults below.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{CycleConfig, RetrainConfig};
use crate::data::{DegradationKind, JitterConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::style::{AugmentOptions, StyleTransferConfig};
use crate::vpe::TrainConfig;

/// Dataset synthesis parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub class_count: usize,
    pub canvas: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub jitter: JitterConfig,
    /// Master seed; every stage derives its streams from this.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            class_count: 10,
            canvas: 16,
            per_class_train: 200,
            per_class_test: 50,
            jitter: JitterConfig::default(),
            seed: 0,
        }
    }
}

/// Encoder architecture and training schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpeSection {
    pub d_z: usize,
    pub channels: [usize; 3],
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub kl_warmup_frac: f64,
    pub ce_weight: f64,
}

impl Default for VpeSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            d_z: 16,
            channels: [8, 12, 16],
            epochs: 20,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            kl_weight: t.kl_weight,
            kl_warmup_frac: t.kl_warmup_frac,
            ce_weight: t.ce_weight,
        }
    }
}

/// Novelty-monitor parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSection {
    pub buffer_capacity: usize,
    pub trigger_min: usize,
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            buffer_capacity: crate::monitor::DEFAULT_BUFFER_CAPACITY,
            trigger_min: 16,
        }
    }
}

/// Style-transfer augmentation parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NstSection {
    pub content_weight: f64,
    pub style_weight: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub seeds_per_entry: usize,
    pub draws_per_seed: usize,
}

impl Default for NstSection {
    fn default() -> Self {
        let s = StyleTransferConfig::default();
        let a = AugmentOptions::default();
        Self {
            content_weight: s.content_weight,
            style_weight: s.style_weight,
            iterations: s.iterations,
            step_size: s.step_size,
            seeds_per_entry: a.seeds_per_entry,
            draws_per_seed: a.draws_per_seed,
        }
    }
}

/// Refresh (incremental retraining) parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainSection {
    pub lambda_consist: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub mix_ratio: f64,
}

impl Default for RetrainSection {
    fn default() -> Self {
        let r = RetrainConfig::default();
        Self {
            lambda_consist: r.lambda_consist,
            epochs: r.epochs,
            learning_rate: r.learning_rate,
            batch_size: r.batch_size,
            momentum: r.momentum,
            kl_weight: r.kl_weight,
            ce_weight: r.ce_weight,
            mix_ratio: 0.5,
        }
    }
}

/// Experiment-matrix parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub seeds: Vec<u64>,
    pub catch_all_threshold: f64,
    pub top_pairs: usize,
    pub aug_kind: DegradationKind,
    pub aug_severity_min: f64,
    pub aug_severity_max: f64,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            catch_all_threshold: 0.15,
            top_pairs: 10,
            aug_kind: DegradationKind::Rust,
            aug_severity_min: 0.7,
            aug_severity_max: 0.8,
        }
    }
}

/// The whole pipeline's configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub vpe: VpeSection,
    pub monitor: MonitorSection,
    pub nst: NstSection,
    pub retrain: RetrainSection,
    pub harness: HarnessSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count {} below the minimum of 2",
                d.class_count
            )));
        }
        if d.canvas < 16 || d.canvas % 8 != 0 {
            return Err(Error::Config(format!(
                "canvas {} must be >= 16 and divisible by 8",
                d.canvas
            )));
        }
        if d.per_class_train == 0 || d.per_class_test == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        let h = &self.harness;
        if h.seeds.is_empty() {
            return Err(Error::Config("harness.seeds must not be empty".into()));
        }
        let mut sorted = h.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("harness.seeds contains duplicates".into()));
        }
        let p = self.retrain.mix_ratio;
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("retrain.mix_ratio {p} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&h.aug_severity_min)
            || !(0.0..=1.0).contains(&h.aug_severity_max)
            || h.aug_severity_min > h.aug_severity_max
        {
            return Err(Error::Config(format!(
                "augmentation severity range [{}, {}] invalid",
                h.aug_severity_min, h.aug_severity_max
            )));
        }
        if self.monitor.buffer_capacity == 0 || self.monitor.trigger_min == 0 {
            return Err(Error::Config(
                "monitor capacity and trigger_min must be positive".into(),
            ));
        }
        self.style_config(self.data.seed).validate()?;
        self.retrain_config(self.data.seed).validate()?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.vpe.epochs,
            learning_rate: self.vpe.learning_rate,
            momentum: self.vpe.momentum,
            batch_size: self.vpe.batch_size,
            kl_weight: self.vpe.kl_weight,
            kl_warmup_frac: self.vpe.kl_warmup_frac,
            ce_weight: self.vpe.ce_weight,
            seed,
        }
    }

    /// Style-transfer settings with extractor and noise streams derived from
    /// the given seed, so the config file stays free of derived seeds.
    pub fn style_config(&self, seed: u64) -> StyleTransferConfig {
        StyleTransferConfig {
            content_weight: self.nst.content_weight,
            style_weight: self.nst.style_weight,
            iterations: self.nst.iterations,
            step_size: self.nst.step_size,
            feature_extractor_seed: rng::derive(seed, "nst-extractor", 0),
            noise_seed: rng::derive(seed, "nst-noise", 0),
        }
    }

    pub fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            seeds_per_entry: self.nst.seeds_per_entry,
            draws_per_seed: self.nst.draws_per_seed,
        }
    }

    pub fn retrain_config(&self, seed: u64) -> RetrainConfig {
        RetrainConfig {
            lambda_consist: self.retrain.lambda_consist,
            epochs: self.retrain.epochs,
            learning_rate: self.retrain.learning_rate,
            batch_size: self.retrain.batch_size,
            momentum: self.retrain.momentum,
            kl_weight: self.retrain.kl_weight,
            ce_weight: self.retrain.ce_weight,
            seed: rng::derive(seed, "retrain", 0),
        }
    }

    pub fn cycle_config(&self, seed: u64) -> CycleConfig {
        CycleConfig {
            trigger_min: self.monitor.trigger_min,
            mix_ratio: self.retrain.mix_ratio,
            mix_target: None,
            augment: self.augment_options(),
            style: self.style_config(seed),
            retrain: self.retrain_config(seed),
            seed,
        }
    }
}

/// Apply the `SIGNADAPT_SEED` environment override to the master seed.
pub fn apply_seed_override(config: &mut PipelineConfig) -> Result<Option<u64>> {
    match std::env::var("SIGNADAPT_SEED") {
        Ok(text) => {
            let seed: u64 = text.trim().parse().map_err(|_| {
                Error::Config(format!("SIGNADAPT_SEED {text:?} is not a valid u64"))
            })?;
            config.data.seed = seed;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml_with_every_section_present() {
        let config = PipelineConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        for section in ["[data]", "[vpe]", "[monitor]", "[nst]", "[retrain]", "[harness]"] {
            assert!(text.contains(section), "missing section {section} in:\n{text}");
        }
        // Spot checks that defaults are written out explicitly.
        for key in [
            "class_count = 10",
            "per_class_train = 200",
            "d_z = 16",
            "buffer_capacity = 256",
            "trigger_min = 16",
            "style_weight = 10.0",
            "iterations = 100",
            "lambda_consist = 1.0",
            "catch_all_threshold = 0.15",
            "aug_kind = \"rust\"",
        ] {
            assert!(text.contains(key), "missing default {key:?} in:\n{text}");
        }
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.harness.seeds, config.harness.seeds);
        assert_eq!(parsed.vpe.channels, config.vpe.channels);
        assert_eq!(parsed.nst.draws_per_seed, config.nst.draws_per_seed);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_are_rejected() {
        let partial: PipelineConfig = toml::from_str("[data]\nclass_count = 4\n").unwrap();
        assert_eq!(partial.data.class_count, 4);
        assert_eq!(partial.data.per_class_train, 200);
        assert_eq!(partial.harness.top_pairs, 10);

        let err = toml::from_str::<PipelineConfig>("[data]\nclass_cuont = 4\n");
        assert!(err.is_err(), "typo in key should be rejected");
    }

    #[test]
    fn invalid_values_fail_validation_with_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");

        let mut bad = PipelineConfig::default();
        bad.data.canvas = 20;
        bad.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);

        let mut bad = PipelineConfig::default();
        bad.harness.seeds = vec![1, 1];
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);

        let mut bad = PipelineConfig::default();
        bad.harness.aug_severity_min = 0.9;
        bad.harness.aug_severity_max = 0.5;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);

        let mut bad = PipelineConfig::default();
        bad.retrain.mix_ratio = 1.5;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn saved_files_load_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let mut config = PipelineConfig::default();
        config.data.seed = 99;
        config.harness.seeds = vec![5, 6];
        config.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded.data.seed, 99);
        assert_eq!(loaded.harness.seeds, vec![5, 6]);
        assert_eq!(loaded.vpe.epochs, config.vpe.epochs);
    }

    #[test]
    fn derived_stage_configs_carry_the_master_seed() {
        let config = PipelineConfig::default();
        let style = config.style_config(7);
        let cycle = config.cycle_config(7);
        assert_eq!(style.feature_extractor_seed, cycle.style.feature_extractor_seed);
        assert_ne!(style.feature_extractor_seed, style.noise_seed);
        assert_eq!(cycle.trigger_min, 16);
        assert_eq!(cycle.retrain.seed, config.retrain_config(7).seed);
        assert_eq!(config.train_config(3).seed, 3);
    }
}

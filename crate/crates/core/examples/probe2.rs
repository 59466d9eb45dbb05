// Temporary adaptation-cycle probe, not part of the shipped crate.
use std::time::Instant;

use signadapt_core::adapt::{adaptation_cycle, retrain, PipelineState};
use signadapt_core::data::{
    apply_degradation, default_catalog, synthesize_dataset, DegradationKind, DegradationRecipe,
    LabeledSample, Origin,
};
use signadapt_core::harness::PipelineConfig;
use signadapt_core::image::ImageTensor;
use signadapt_core::metrics::evaluate_model;
use signadapt_core::monitor::{calibrate_thresholds, UnknownBuffer};
use signadapt_core::rng;
use signadapt_core::style::mix_datasets;
use signadapt_core::vpe::{train_vpe, PrototypeCatalog, VpeParams};

fn degrade_fixed(
    set: &[LabeledSample],
    severity: f64,
    seed: u64,
    stream: &str,
) -> Vec<LabeledSample> {
    set.iter()
        .enumerate()
        .map(|(i, s)| {
            let recipe = DegradationRecipe::new(
                DegradationKind::Rust,
                severity,
                rng::derive(seed, stream, i as u64),
            )
            .unwrap();
            LabeledSample {
                image: apply_degradation(&s.image, &recipe).unwrap(),
                label: s.label,
                origin: Origin::UnknownCapture,
                provenance_seed: recipe.seed,
            }
        })
        .collect()
}

fn main() {
    // args: [mode] [style_weight] [iterations] [step] [retrain_epochs] [lambda] [lr]
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("nst").to_string();
    let style_weight: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let iterations: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let step: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let retrain_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lambda: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3e-4);

    let t0 = Instant::now();
    let mut config = PipelineConfig::default();
    config.nst.style_weight = style_weight;
    config.nst.iterations = iterations;
    config.nst.step_size = step;
    config.retrain.epochs = retrain_epochs;
    config.retrain.lambda_consist = lambda;
    config.retrain.learning_rate = lr;
    let seed = config.data.seed;
    let specs = default_catalog(config.data.class_count).unwrap();
    let jitter = config.data.jitter;
    let canvas = config.data.canvas;

    let train = synthesize_dataset(
        &specs,
        canvas,
        config.data.per_class_train,
        &jitter,
        rng::derive(seed, "train", 0),
    )
    .unwrap();
    let validation = synthesize_dataset(
        &specs,
        canvas,
        config.data.per_class_test,
        &jitter,
        rng::derive(seed, "validation", 0),
    )
    .unwrap();
    let test_clean = synthesize_dataset(
        &specs,
        canvas,
        config.data.per_class_test,
        &jitter,
        rng::derive(seed, "test", 0),
    )
    .unwrap();
    let eval_degraded = degrade_fixed(&test_clean, 0.8, seed, "eval-degraded");

    let train_seed = rng::derive(seed, "loop-train", 0);
    let mut params = VpeParams::new(
        canvas,
        config.vpe.d_z,
        config.vpe.channels,
        config.data.class_count,
        train_seed,
    )
    .unwrap();
    let mut catalog = PrototypeCatalog::render(&specs, canvas, config.vpe.d_z).unwrap();
    train_vpe(&mut params, &mut catalog, &train, &config.train_config(train_seed)).unwrap();
    println!("trained: {:.1}s", t0.elapsed().as_secs_f64());

    if mode == "oracle" {
        // Upper bound: retrain on oracle rust degradations instead of NST.
        let pre_c = evaluate_model(&params, &catalog, &test_clean).unwrap();
        let pre_d = evaluate_model(&params, &catalog, &eval_degraded).unwrap();
        let aug = degrade_fixed(&train, 0.8, seed, "oracle-aug");
        let mixed = mix_datasets(
            &train,
            &aug,
            config.retrain.mix_ratio,
            train.len(),
            rng::derive(seed, "oracle-mix", 0),
        )
        .unwrap();
        let outcome = retrain(
            &params,
            &catalog,
            &mixed.samples,
            &train,
            &config.retrain_config(seed),
        )
        .unwrap();
        let post_c = evaluate_model(&outcome.params, &outcome.catalog, &test_clean).unwrap();
        let post_d = evaluate_model(&outcome.params, &outcome.catalog, &eval_degraded).unwrap();
        println!(
            "oracle retrain: degraded acc {:.4} -> {:.4} (gain {:+.4}) | clean f1 {:.4} -> {:.4} (drop {:+.4})",
            pre_d.accuracy,
            post_d.accuracy,
            post_d.accuracy - pre_d.accuracy,
            pre_c.f1,
            post_c.f1,
            pre_c.f1 - post_c.f1
        );
        println!("wall total {:.1}s", t0.elapsed().as_secs_f64());
        return;
    }

    let synthetic: Vec<ImageTensor> = validation
        .iter()
        .take(256)
        .enumerate()
        .map(|(i, s)| {
            let kind = DegradationKind::ALL[i % DegradationKind::ALL.len()];
            let severity = 0.5 + 0.4 * rng::hash_unit(seed, i as u64, 7);
            let recipe = DegradationRecipe::new(
                kind,
                severity,
                rng::derive(seed, "calibrate", i as u64),
            )
            .unwrap();
            apply_degradation(&s.image, &recipe).unwrap()
        })
        .collect();
    let calibration = calibrate_thresholds(&validation, &synthetic, &params, &catalog).unwrap();
    println!(
        "calibrated tau_d={:.4} tau_y={:.4} f1={:.3} degenerate={} at {:.1}s",
        calibration.thresholds.tau_d,
        calibration.thresholds.tau_y,
        calibration.f1,
        calibration.degenerate,
        t0.elapsed().as_secs_f64()
    );

    let stream_clean =
        synthesize_dataset(&specs, canvas, 10, &jitter, rng::derive(seed, "stream", 0)).unwrap();
    let stream: Vec<ImageTensor> = degrade_fixed(&stream_clean, 0.8, seed, "stream-degrade")
        .into_iter()
        .map(|s| s.image)
        .collect();

    let mut state = PipelineState {
        params,
        catalog,
        thresholds: calibration.thresholds,
        buffer: UnknownBuffer::new(config.monitor.buffer_capacity).unwrap(),
        originals: train,
        validation,
    };
    let cycle = config.cycle_config(seed);
    let dir = std::env::temp_dir().join(format!("cycle-probe-{}", std::process::id()));
    let report =
        adaptation_cycle(&mut state, &stream, &test_clean, &eval_degraded, &cycle, &dir).unwrap();
    println!(
        "fired={} flagged={} buffered={} n_prime={}",
        report.fired, report.flagged_count, report.buffered_count, report.n_prime
    );
    let pre_d = report.pre_degraded.accuracy;
    let post_d = report.post_degraded.unwrap().accuracy;
    let pre_c = report.pre_clean.f1;
    let post_c = report.post_clean.unwrap().f1;
    println!("degraded acc {:.4} -> {:.4} (gain {:+.4})", pre_d, post_d, post_d - pre_d);
    println!("clean f1 {:.4} -> {:.4} (drop {:+.4})", pre_c, post_c, pre_c - post_c);
    println!(
        "checks: flagged>=80 {} | gain>=0.15 {} | clean-drop<=0.08 {}",
        report.flagged_count >= 80,
        post_d - pre_d >= 0.15,
        pre_c - post_c <= 0.08
    );
    println!(
        "wall total {:.1}s (cycle {:.1}s)",
        t0.elapsed().as_secs_f64(),
        report.wall_time_seconds
    );
    let _ = std::fs::remove_dir_all(&dir);
}

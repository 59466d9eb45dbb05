// Temporary tuning probe, not part of the shipped crate.
use std::time::Instant;

use signadapt_core::harness::{run_matrix, PipelineConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // canvas epochs d_z seed [per_class_train] [sev_min] [sev_max]
    let canvas: usize = args[0].parse().unwrap();
    let epochs: usize = args[1].parse().unwrap();
    let d_z: usize = args[2].parse().unwrap();
    let seed: u64 = args[3].parse().unwrap();
    let per_class_train: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(200);
    let sev_min: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let sev_max: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.9);

    let mut config = PipelineConfig::default();
    config.data.canvas = canvas;
    config.data.per_class_train = per_class_train;
    config.data.per_class_test = 50;
    config.vpe.epochs = epochs;
    config.vpe.d_z = d_z;
    config.harness.aug_severity_min = sev_min;
    config.harness.aug_severity_max = sev_max;

    let t0 = Instant::now();
    let results = run_matrix(&config, &[seed]).unwrap();
    let mut f1 = [0.0f64; 7];
    for r in &results {
        println!(
            "E{} train={} test={} f1={:.4} acc={:.4}",
            r.spec.id, r.spec.train_source, r.spec.test_source, r.report.f1, r.report.accuracy
        );
        f1[r.spec.id as usize] = r.report.f1;
    }
    println!(
        "checks: E1>=0.90 {} | E1-E2>=0.10 {:.4} | E4-E2>=0.10 {:.4} | E1-E3<=0.08 {:.4} | E6-E5 {:.4}",
        f1[1] >= 0.90,
        f1[1] - f1[2],
        f1[4] - f1[2],
        f1[1] - f1[3],
        f1[6] - f1[5]
    );
    println!("wall: {:.1}s", t0.elapsed().as_secs_f64());
}

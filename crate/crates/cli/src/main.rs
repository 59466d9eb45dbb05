//! Command-line driver for the self-adapting sign-classification pipeline.
//!
//! The verbs cover each loop stage on its own (`gen-data`, `train`,
//! `monitor`, `augment`, `mix`, `retrain`), the closed adaptation loop
//! (`loop`), the six-experiment evaluation matrix (`experiment`), and
//! run-report inspection (`report`). Every verb reads the same optional
//! `--config` TOML file, and the `SIGNADAPT_SEED` environment variable
//! overrides the configured master seed.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use signadapt_core::adapt::{
    adaptation_cycle, retrain, synthetic_unknowns, PipelineState, RECALIBRATION_UNKNOWN_CAP,
};
use signadapt_core::data::{
    apply_degradation, dataset_index, default_catalog, load_dataset, save_dataset,
    synthesize_dataset, DegradationKind, DegradationRecipe,
};
use signadapt_core::harness::{
    apply_seed_override, build_experiment_datasets, emit_report, experiment_spec, fresh_run_dir,
    run_experiment, run_matrix, PipelineConfig, EXPERIMENT_MATRIX,
};
use signadapt_core::metrics::{confusion_pairs, detect_catch_all};
use signadapt_core::monitor::{
    append_events, calibrate_thresholds, judge, read_events, BufferedUnknown, DetectionVerdict,
    MonitorEvent, Thresholds, Trigger, UnknownBuffer,
};
use signadapt_core::rng;
use signadapt_core::style::{
    build_augmentation_set, load_augmentation_set, mix_datasets, save_augmentation_set,
};
use signadapt_core::vpe::{
    checkpoint_dir_name, compute_centroids, dataset_fingerprint, latest_checkpoint,
    load_checkpoint, save_checkpoint, train_vpe, write_training_log, CheckpointMeta,
};
use signadapt_core::{
    Error, ImageTensor, LabeledSample, Origin, PrototypeCatalog, Result, VpeParams,
};

const THRESHOLDS_FILE: &str = "thresholds.json";

#[derive(Parser)]
#[command(
    name = "signadapt",
    version,
    about = "Self-adapting traffic-sign classification pipeline"
)]
struct Cli {
    /// Pipeline configuration file (TOML); built-in defaults apply when absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize clean train/validation/test splits, optionally plus a degraded stream.
    GenData(GenDataArgs),
    /// Train the encoder on a dataset and calibrate monitoring thresholds.
    Train(TrainArgs),
    /// Judge a directory of observations and buffer the unfamiliar ones.
    Monitor(MonitorArgs),
    /// Stylize buffered unknowns into labeled augmented samples.
    Augment(AugmentArgs),
    /// Blend original and augmented samples into a mixed training set.
    Mix(MixArgs),
    /// Fine-tune the newest checkpoint on a mixed dataset and recalibrate.
    Retrain(RetrainArgs),
    /// Run cells of the six-experiment evaluation matrix.
    Experiment(ExperimentArgs),
    /// Run one full monitor-augment-retrain adaptation cycle on a stream.
    Loop(LoopArgs),
    /// Summarize a finished experiment run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; receives train/, validation/, and test/ splits.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Also write a stream/ split with this many degraded images.
    #[arg(long, default_value_t = 0, value_name = "N")]
    stream_count: usize,
    /// Degradation applied to the stream split.
    #[arg(long, default_value = "rust")]
    stream_kind: DegradationKind,
    /// Stream degradation severity in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    stream_severity: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding train/ and validation/ splits.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Run directory; a fresh runs/<timestamp>-<seed>/ is created when absent.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    /// Run directory holding the serving checkpoint.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory of observations to judge (labels are ignored).
    #[arg(long)]
    input: PathBuf,
    /// Thresholds file; defaults to thresholds.json inside the run directory.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Buffer file for flagged observations; defaults to buffer.jsonl inside
    /// the run directory. Appended, like the event log.
    #[arg(long)]
    buffer_out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Run directory holding the serving checkpoint.
    #[arg(long)]
    run: PathBuf,
    /// Buffer file written by `monitor`.
    #[arg(long)]
    buffer: PathBuf,
    /// Dataset directory; train/ supplies the content-draw pool.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for the stylized samples and their manifest.
    #[arg(long)]
    out: PathBuf,
    /// Noise seeds per buffered unknown; defaults to nst.seeds_per_entry.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct MixArgs {
    /// Dataset directory; train/ supplies the original pool.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Augmentation directory written by `augment`.
    #[arg(long)]
    aug: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of originals in the blend; defaults to retrain.mix_ratio.
    #[arg(long)]
    p: Option<f64>,
    /// Output size; defaults to the original split's size.
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args)]
struct RetrainArgs {
    /// Run directory; the newest checkpoint is the fine-tuning start.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; train/ anchors consistency, validation/ recalibrates.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Mixed dataset directory written by `mix`.
    #[arg(long)]
    mixed: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("cells").required(true).args(["id", "all"])))]
struct ExperimentArgs {
    /// Matrix cell to run and print (1..=6), without writing artifacts.
    #[arg(long, value_name = "N")]
    id: Option<u8>,
    /// Run every cell across the configured seeds and write a report.
    #[arg(long)]
    all: bool,
    /// Artifact directory for --all; defaults to a fresh runs/<timestamp>-<seed>/.
    #[arg(long, requires = "all")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoopArgs {
    /// Run directory of a trained pipeline (checkpoint plus thresholds).
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory holding train/, validation/, and test/ splits.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Dataset directory of incoming field observations.
    #[arg(long)]
    stream: PathBuf,
    /// Labeled degraded split for before/after scoring; defaults to the
    /// stream itself.
    #[arg(long)]
    degraded: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding summary.csv and confusion_<id>.csv files.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = apply_seed_override(&mut config)? {
        log::info!("SIGNADAPT_SEED overrides the master seed: {seed}");
    }
    config.validate()?;
    match &cli.command {
        Command::GenData(args) => gen_data(&config, args),
        Command::Train(args) => train(&config, args),
        Command::Monitor(args) => monitor(&config, args),
        Command::Augment(args) => augment(&config, args),
        Command::Mix(args) => mix(&config, args),
        Command::Retrain(args) => refresh(&config, args),
        Command::Experiment(args) => experiment(&config, args),
        Command::Loop(args) => run_loop(&config, args),
        Command::Report(args) => report(&config, args),
    }
}

/// Use the given directory (creating it) or allocate a fresh
/// `runs/<timestamp>-<seed>/` under the working directory.
fn resolve_run_dir(run: Option<&Path>, seed: u64) -> Result<PathBuf> {
    match run {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Ok(dir.to_path_buf())
        }
        None => fresh_run_dir(Path::new("."), seed),
    }
}

/// Load the newest checkpoint under a run directory together with a
/// prototype catalog re-embedded by it.
fn load_model(run_dir: &Path) -> Result<(VpeParams<f32>, PrototypeCatalog, CheckpointMeta)> {
    let dir = latest_checkpoint(run_dir)?;
    let (params, meta) = load_checkpoint(&dir)?;
    let specs = default_catalog(meta.class_count)?;
    let rendered = PrototypeCatalog::render(&specs, meta.canvas, meta.d_z)?;
    let catalog = compute_centroids(&rendered, &params)?;
    Ok((params, catalog, meta))
}

/// One line of the buffer file `monitor` writes and `augment` reads: a
/// flagged observation plus the scores that flagged it. Paths are recorded
/// as resolved at monitoring time, so both verbs must run from the same
/// working directory when relative paths are involved.
#[derive(Debug, Serialize, Deserialize)]
struct BufferRecord {
    seq: u64,
    path: PathBuf,
    predicted_label: u32,
    nearest_class: u32,
    confidence: f64,
    distance: f64,
    trigger: Trigger,
}

fn append_buffer(path: &Path, records: &[BufferRecord]) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("buffer record serialization: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_buffer(path: &Path) -> Result<Vec<BufferRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn gen_data(config: &PipelineConfig, args: &GenDataArgs) -> Result<()> {
    let d = &config.data;
    let specs = default_catalog(d.class_count)?;
    for (split, per_class) in [
        ("train", d.per_class_train),
        ("validation", d.per_class_test),
        ("test", d.per_class_test),
    ] {
        let samples = synthesize_dataset(
            &specs,
            d.canvas,
            per_class,
            &d.jitter,
            rng::derive(d.seed, split, 0),
        )?;
        let dir = args.out.join(split);
        save_dataset(&dir, &samples)?;
        println!("wrote {} samples to {}", samples.len(), dir.display());
    }
    if args.stream_count > 0 {
        let per_class = args.stream_count.div_ceil(d.class_count);
        let clean = synthesize_dataset(
            &specs,
            d.canvas,
            per_class,
            &d.jitter,
            rng::derive(d.seed, "stream", 0),
        )?;
        // Interleave classes so truncation keeps the stream balanced.
        let mut stream = Vec::with_capacity(args.stream_count);
        'fill: for i in 0..per_class {
            for class in 0..d.class_count {
                if stream.len() == args.stream_count {
                    break 'fill;
                }
                let sample = &clean[class * per_class + i];
                let recipe = DegradationRecipe::new(
                    args.stream_kind,
                    args.stream_severity,
                    rng::derive(d.seed, "stream-degrade", stream.len() as u64),
                )?;
                stream.push(LabeledSample {
                    image: apply_degradation(&sample.image, &recipe)?,
                    label: sample.label,
                    origin: Origin::Augmented,
                    provenance_seed: recipe.seed,
                });
            }
        }
        let dir = args.out.join("stream");
        save_dataset(&dir, &stream)?;
        println!(
            "wrote {} {}-degraded stream images (severity {}) to {}",
            stream.len(),
            args.stream_kind,
            args.stream_severity,
            dir.display()
        );
    }
    config.save(&args.out.join("config.toml"))?;
    Ok(())
}

fn train(config: &PipelineConfig, args: &TrainArgs) -> Result<()> {
    let canvas = Some(config.data.canvas);
    let train_split = load_dataset(&args.data.join("train"), canvas)?;
    let validation = load_dataset(&args.data.join("validation"), canvas)?;
    let run_dir = resolve_run_dir(args.run.as_deref(), config.data.seed)?;
    config.save(&run_dir.join("config.toml"))?;

    let seed = rng::derive(config.data.seed, "pipeline-train", 0);
    let specs = default_catalog(config.data.class_count)?;
    let mut params = VpeParams::new(
        config.data.canvas,
        config.vpe.d_z,
        config.vpe.channels,
        config.data.class_count,
        seed,
    )?;
    let mut catalog = PrototypeCatalog::render(&specs, config.data.canvas, config.vpe.d_z)?;
    let log = train_vpe(&mut params, &mut catalog, &train_split, &config.train_config(seed))?;
    write_training_log(&run_dir.join("training_log.csv"), &log)?;

    let meta = CheckpointMeta {
        version: params.version,
        parent_version: None,
        d_z: params.d_z,
        canvas: params.canvas,
        channels: params.channels(),
        class_count: params.class_count(),
        seed,
        data_fingerprint: dataset_fingerprint(&train_split),
    };
    save_checkpoint(&run_dir.join(checkpoint_dir_name(params.version)), &params, &meta)?;

    let unknowns = synthetic_unknowns(&validation, RECALIBRATION_UNKNOWN_CAP, config.data.seed)?;
    let calibration = calibrate_thresholds(&validation, &unknowns, &params, &catalog)?;
    calibration.thresholds.save(&run_dir.join(THRESHOLDS_FILE))?;

    let last = log.last().expect("training ran at least one epoch");
    println!(
        "trained encoder v{} on {} samples ({} epochs, final loss {:.4})",
        params.version,
        train_split.len(),
        log.len(),
        last.loss_total
    );
    println!(
        "thresholds tau_d {:.4}, tau_y {:.2} (flagging F1 {:.3}); artifacts in {}",
        calibration.thresholds.tau_d,
        calibration.thresholds.tau_y,
        calibration.f1,
        run_dir.display()
    );
    Ok(())
}

fn monitor(_config: &PipelineConfig, args: &MonitorArgs) -> Result<()> {
    let (params, catalog, meta) = load_model(&args.run)?;
    let thresholds_path = args
        .thresholds
        .clone()
        .unwrap_or_else(|| args.run.join(THRESHOLDS_FILE));
    let thresholds = Thresholds::load(&thresholds_path)?;

    // Continue the sequence numbering of the run's append-only event log.
    let events_path = args.run.join("events.jsonl");
    let mut next_seq = if events_path.is_file() {
        read_events(&events_path)?.last().map_or(0, |e| e.seq + 1)
    } else {
        0
    };

    let index = dataset_index(&args.input)?;
    let mut events = Vec::new();
    let mut records = Vec::new();
    for (rel, _) in &index {
        let path = args.input.join(rel);
        let image = ImageTensor::load(&path, Some(meta.canvas))?;
        let verdict = judge(&image, &params, &catalog, &thresholds)?;
        if verdict.flagged {
            events.push(MonitorEvent {
                seq: next_seq,
                distance: verdict.distance,
                confidence: verdict.confidence,
                predicted_label: verdict.predicted_label,
                trigger: verdict.trigger,
            });
            records.push(BufferRecord {
                seq: next_seq,
                path,
                predicted_label: verdict.predicted_label,
                nearest_class: verdict.nearest_class,
                confidence: verdict.confidence,
                distance: verdict.distance,
                trigger: verdict.trigger,
            });
            next_seq += 1;
        }
    }
    append_events(&events_path, &events)?;
    let buffer_path = args
        .buffer_out
        .clone()
        .unwrap_or_else(|| args.run.join("buffer.jsonl"));
    append_buffer(&buffer_path, &records)?;
    println!(
        "flagged {} of {} observations; events in {}, buffer in {}",
        records.len(),
        index.len(),
        events_path.display(),
        buffer_path.display()
    );
    Ok(())
}

fn augment(config: &PipelineConfig, args: &AugmentArgs) -> Result<()> {
    let (_, catalog, meta) = load_model(&args.run)?;
    let mut records = read_buffer(&args.buffer)?;
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{}: buffer lists no flagged observations",
            args.buffer.display()
        )));
    }
    // Apply the monitor's FIFO capacity to the file form as well.
    let capacity = config.monitor.buffer_capacity;
    if records.len() > capacity {
        log::warn!(
            "buffer file holds {} entries; keeping the newest {capacity}",
            records.len()
        );
        records.drain(..records.len() - capacity);
    }
    let entries: Vec<BufferedUnknown> = records
        .iter()
        .map(|r| {
            Ok(BufferedUnknown {
                image: ImageTensor::load(&r.path, Some(meta.canvas))?,
                verdict: DetectionVerdict::new(
                    r.predicted_label,
                    r.nearest_class,
                    r.confidence,
                    r.distance,
                    r.trigger,
                ),
                seq: r.seq,
            })
        })
        .collect::<Result<_>>()?;

    let originals = load_dataset(&args.data.join("train"), Some(meta.canvas))?;
    let mut options = config.augment_options();
    if let Some(seeds) = args.seeds {
        options.seeds_per_entry = seeds;
    }
    let set = build_augmentation_set(
        &entries,
        &catalog,
        &originals,
        &options,
        &config.style_config(config.data.seed),
    )?;
    save_augmentation_set(&set, &args.out)?;
    println!(
        "stylized {} buffered unknowns into {} samples at {}",
        entries.len(),
        set.len(),
        args.out.display()
    );
    Ok(())
}

fn mix(config: &PipelineConfig, args: &MixArgs) -> Result<()> {
    let originals = load_dataset(&args.data.join("train"), Some(config.data.canvas))?;
    let augmented = load_augmentation_set(&args.aug)?;
    let p = args.p.unwrap_or(config.retrain.mix_ratio);
    let target = args.target.unwrap_or(originals.len());
    let mixed = mix_datasets(
        &originals,
        &augmented.samples,
        p,
        target,
        rng::derive(config.data.seed, "mix", 0),
    )?;
    save_dataset(&args.out, &mixed.samples)?;
    let (original_count, augmented_count) = mixed.origin_counts;
    println!(
        "mixed {} samples ({original_count} original, {augmented_count} augmented, p {:.2}) into {}",
        mixed.samples.len(),
        mixed.ratio_p,
        args.out.display()
    );
    Ok(())
}

fn refresh(config: &PipelineConfig, args: &RetrainArgs) -> Result<()> {
    let (params, catalog, meta) = load_model(&args.run)?;
    let canvas = Some(meta.canvas);
    let originals = load_dataset(&args.data.join("train"), canvas)?;
    let validation = load_dataset(&args.data.join("validation"), canvas)?;
    let mixed = load_dataset(&args.mixed, canvas)?;

    let retrain_config = config.retrain_config(config.data.seed);
    let outcome = retrain(&params, &catalog, &mixed, &originals, &retrain_config)?;
    write_training_log(
        &args.run.join(format!("retrain_{}.csv", outcome.params.version)),
        &outcome.log,
    )?;
    let new_meta = CheckpointMeta {
        version: outcome.params.version,
        parent_version: Some(params.version),
        d_z: outcome.params.d_z,
        canvas: outcome.params.canvas,
        channels: outcome.params.channels(),
        class_count: outcome.params.class_count(),
        seed: retrain_config.seed,
        data_fingerprint: dataset_fingerprint(&mixed),
    };
    save_checkpoint(
        &args.run.join(checkpoint_dir_name(outcome.params.version)),
        &outcome.params,
        &new_meta,
    )?;

    let unknowns = synthetic_unknowns(&validation, RECALIBRATION_UNKNOWN_CAP, config.data.seed)?;
    let calibration =
        calibrate_thresholds(&validation, &unknowns, &outcome.params, &outcome.catalog)?;
    calibration.thresholds.save(&args.run.join(THRESHOLDS_FILE))?;
    println!(
        "refreshed encoder v{} -> v{} on {} mixed samples; thresholds tau_d {:.4}, tau_y {:.2}",
        params.version,
        outcome.params.version,
        mixed.len(),
        calibration.thresholds.tau_d,
        calibration.thresholds.tau_y
    );
    Ok(())
}

fn experiment(config: &PipelineConfig, args: &ExperimentArgs) -> Result<()> {
    if args.all {
        let run_dir = resolve_run_dir(args.out.as_deref(), config.data.seed)?;
        config.save(&run_dir.join("config.toml"))?;
        let results = run_matrix(config, &config.harness.seeds)?;
        emit_report(&results, &run_dir)?;
        println!("seed-averaged F1 over seeds {:?}:", config.harness.seeds);
        for spec in EXPERIMENT_MATRIX {
            let f1s: Vec<f64> = results
                .iter()
                .filter(|r| r.spec.id == spec.id)
                .map(|r| r.report.f1)
                .collect();
            let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
            println!(
                "  {} (train {:>13}, test {:>4}): F1 {mean:.4}",
                spec.id,
                spec.train_source.to_string(),
                spec.test_source.to_string()
            );
        }
        println!("artifacts in {}", run_dir.display());
    } else {
        let id = args.id.expect("clap enforces exactly one of --id/--all");
        let spec = experiment_spec(id)?;
        println!(
            "experiment {id}: train {} / test {}",
            spec.train_source, spec.test_source
        );
        for &seed in &config.harness.seeds {
            let datasets = build_experiment_datasets(config, seed)?;
            let report = run_experiment(spec, &datasets, config)?;
            println!(
                "  seed {seed}: precision {:.4}, recall {:.4}, F1 {:.4}, accuracy {:.4}",
                report.precision, report.recall, report.f1, report.accuracy
            );
        }
    }
    Ok(())
}

fn run_loop(config: &PipelineConfig, args: &LoopArgs) -> Result<()> {
    let (params, catalog, meta) = load_model(&args.run)?;
    let thresholds = Thresholds::load(&args.run.join(THRESHOLDS_FILE))?;
    let canvas = Some(meta.canvas);
    let originals = load_dataset(&args.data.join("train"), canvas)?;
    let validation = load_dataset(&args.data.join("validation"), canvas)?;
    let eval_clean = load_dataset(&args.data.join("test"), canvas)?;
    let stream = load_dataset(&args.stream, canvas)?;
    let eval_degraded = match &args.degraded {
        Some(dir) => load_dataset(dir, canvas)?,
        None => stream.clone(),
    };
    let incoming: Vec<ImageTensor> = stream.iter().map(|s| s.image.clone()).collect();

    // The buffer starts empty each invocation; streams shorter than the
    // trigger leave no carry-over between runs of this verb.
    let mut state = PipelineState {
        params,
        catalog,
        thresholds,
        buffer: UnknownBuffer::new(config.monitor.buffer_capacity)?,
        originals,
        validation,
    };
    let report = adaptation_cycle(
        &mut state,
        &incoming,
        &eval_clean,
        &eval_degraded,
        &config.cycle_config(config.data.seed),
        &args.run,
    )?;
    state.thresholds.save(&args.run.join(THRESHOLDS_FILE))?;
    let report_path = args.run.join(format!("report_v{}.json", state.params.version));
    report.save(&report_path)?;

    if report.fired {
        let post_clean = report.post_clean.expect("fired cycle reports post metrics");
        let post_degraded = report
            .post_degraded
            .expect("fired cycle reports post metrics");
        println!(
            "cycle fired: {} flagged, {} buffered, {} augmented samples",
            report.flagged_count, report.buffered_count, report.n_prime
        );
        println!(
            "  degraded accuracy {:.4} -> {:.4}; clean F1 {:.4} -> {:.4}",
            report.pre_degraded.accuracy,
            post_degraded.accuracy,
            report.pre_clean.f1,
            post_clean.f1
        );
        println!(
            "  checkpoint {} -> {}; took {:.1}s",
            report.checkpoint_before,
            report.checkpoint_after.as_deref().unwrap_or("-"),
            report.wall_time_seconds
        );
    } else {
        println!(
            "cycle idle: {} of {} observations flagged (trigger {}); degraded accuracy {:.4}, clean F1 {:.4}",
            report.flagged_count,
            incoming.len(),
            config.monitor.trigger_min,
            report.pre_degraded.accuracy,
            report.pre_clean.f1
        );
    }
    println!("report in {}", report_path.display());
    Ok(())
}

fn read_confusion(path: &Path) -> Result<Array2<u64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<u64>().map_err(|e| {
                    Error::Data(format!("{}: bad count {cell:?}: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<u64>>>()?;
        rows.push(row);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Data(format!(
            "{}: confusion matrix is not square",
            path.display()
        )));
    }
    Array2::from_shape_vec((k, k), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

fn report(config: &PipelineConfig, args: &ReportArgs) -> Result<()> {
    let summary_path = args.run.join("summary.csv");
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "{:<4} {:<14} {:<5} {:>9} {:>7} {:>7} {:>9}",
        "exp", "train", "test", "precision", "recall", "f1", "accuracy"
    );
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Data(format!(
                "{}: malformed row {line:?}",
                summary_path.display()
            )));
        }
        println!(
            "{:<4} {:<14} {:<5} {:>9} {:>7} {:>7} {:>9}",
            cols[0], cols[1], cols[2], cols[3], cols[4], cols[5], cols[6]
        );
    }

    for spec in EXPERIMENT_MATRIX {
        let path = args.run.join(format!("confusion_{}.csv", spec.id));
        if !path.is_file() {
            log::warn!("{} missing; skipping confusion analysis", path.display());
            continue;
        }
        let confusion = read_confusion(&path)?;
        println!(
            "experiment {} (train {}, test {}):",
            spec.id, spec.train_source, spec.test_source
        );
        let catch_all = detect_catch_all(&confusion, config.harness.catch_all_threshold);
        if catch_all.is_empty() {
            println!("  no catch-all column");
        }
        for (class, fraction) in catch_all {
            println!(
                "  catch-all column: class {class} absorbs {:.1}% of all errors",
                fraction * 100.0
            );
        }
        let pairs = confusion_pairs(&confusion, config.harness.top_pairs);
        if pairs.is_empty() {
            println!("  no misclassifications");
        } else {
            let rendered: Vec<String> = pairs
                .iter()
                .map(|(truth, predicted, count)| format!("{truth}->{predicted} x{count}"))
                .collect();
            println!("  top confusions: {}", rendered.join(", "));
        }
    }
    Ok(())
}

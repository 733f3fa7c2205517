use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use itermask::calibration::{main_error_pool, sensitivity_sweep_tau, CalibrationResult, ErrorPool};
use itermask::data_io::{
    extract_slices, load_phantom_dataset, load_volume, save_mask_volume, slice_from_raw, write_phantom_dataset, Axis,
    mask_image, save_png, LabeledSlice, Slice,
};
use itermask::pipeline::{evaluate_models, healthy_phantoms, lesion_phantoms, mean, train_models, ExperimentConfig, TrainedModels};
use itermask::reconstruction::split_indices;
use itermask::refinement::{export_trace, run_refinement, RefinementConfig};
use itermask::{Error, ErrorCategory, Model32, Plane, SpatialMask};
use itermask_service::{ServiceConfig, CALIBRATION_FILE, INIT_CHECKPOINT, MAIN_CHECKPOINT};
use serde::Serialize;

const UNGUIDED_CHECKPOINT: &str = "main-unguided.ckpt";

#[derive(Parser)]
#[command(name = "itermask", version, about = "Iterative mask refinement for unsupervised lesion segmentation")]
struct Cli {
    /// Experiment TOML (service TOML for `serve`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, calibration, refinement and phantom seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the init, main (and unguided ablation) models on healthy phantoms, then calibrate.
    Train,
    /// Recompute the threshold calibration of a model directory.
    Calibrate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Segment a NIfTI volume or a PNG slice.
    Infer {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "percentile")]
        tau: Option<f64>,
        #[arg(long)]
        percentile: Option<f64>,
        /// Skip slices whose brain covers less than this fraction.
        #[arg(long, default_value_t = 0.05)]
        min_brain_fraction: f64,
    },
    /// Score the pipeline (and ablations) on lesion phantoms.
    Evaluate {
        #[arg(long)]
        models: PathBuf,
        /// Phantom dataset directory; defaults to the configured lesion phantoms.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mean Dice over the configured calibration percentiles.
    Sweep {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a phantom dataset.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        lesion: bool,
    },
    /// Run the HTTP session service.
    Serve,
}

enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Internal => 1,
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::ModelMismatch => 5,
        ErrorCategory::Validation => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            let _ = Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg).print();
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error ({:?}): {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(Error::Config(format!("device {:?} is not available; use cpu", cli.device)).into());
    }
    match &cli.command {
        Command::Train => train(cli),
        Command::Calibrate { models, percentile } => calibrate(cli, models, *percentile),
        Command::Infer {
            models,
            input,
            tau,
            percentile,
            min_brain_fraction,
        } => infer(cli, models, input, *tau, *percentile, *min_brain_fraction),
        Command::Evaluate { models, data } => evaluate(cli, models, data.as_deref()),
        Command::Sweep { models, data } => sweep(cli, models, data.as_deref()),
        Command::Phantom { count, lesion } => phantom(cli, *count, *lesion),
        Command::Serve => serve(cli),
    }
}

fn experiment_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config <FILE>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.refinement.seed = seed;
        cfg.calibration_seed = seed;
        cfg.phantom.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &Path) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| default.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

fn persist_config(dir: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    write(&dir.join("config.toml"), cfg.to_toml())
}

fn validation_split(cfg: &ExperimentConfig, healthy: &[Slice<f32>]) -> Vec<Slice<f32>> {
    let (_, val) = split_indices(healthy.len(), cfg.train.validation_fraction, cfg.train.seed);
    val.into_iter().map(|i| healthy[i].clone()).collect()
}

fn calibration_pool(cfg: &ExperimentConfig, main: &Model32) -> CliResult<ErrorPool> {
    let healthy = healthy_phantoms::<f32>(cfg)?;
    Ok(main_error_pool(
        &validation_split(cfg, &healthy),
        main,
        &cfg.train.sampler,
        cfg.calibration_seed,
    )?)
}

fn load_models(dir: &Path) -> CliResult<TrainedModels<f32>> {
    let unguided_path = dir.join(UNGUIDED_CHECKPOINT);
    Ok(TrainedModels {
        init: Model32::load(dir.join(INIT_CHECKPOINT))?,
        main: Model32::load(dir.join(MAIN_CHECKPOINT))?,
        unguided: if unguided_path.exists() {
            Some(Model32::load(unguided_path)?)
        } else {
            None
        },
        logs: Vec::new(),
    })
}

fn load_calibration(dir: &Path) -> CliResult<Option<CalibrationResult>> {
    let path = dir.join(CALIBRATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn check_radius(cfg: &ExperimentConfig, models: &TrainedModels<f32>) -> CliResult<()> {
    if models.main.radius() != cfg.refinement.radius {
        return Err(Error::ModelMismatch(format!(
            "model radius {} differs from configured radius {}",
            models.main.radius(),
            cfg.refinement.radius
        ))
        .into());
    }
    Ok(())
}

fn train(cli: &Cli) -> CliResult<()> {
    let cfg = experiment_config(cli)?;
    let out = out_dir(cli, Path::new("models/phantom"))?;
    persist_config(&out, &cfg)?;
    let healthy = healthy_phantoms::<f32>(&cfg)?;
    tracing::info!(count = healthy.len(), "training on healthy phantoms");
    let models = train_models(&cfg, &healthy, |name, epoch, log| {
        let val = log.losses("validation").last().copied();
        tracing::info!(model = name, epoch, validation = val, "epoch");
    })?;
    models.init.save(out.join(INIT_CHECKPOINT))?;
    models.main.save(out.join(MAIN_CHECKPOINT))?;
    if let Some(u) = &models.unguided {
        u.save(out.join(UNGUIDED_CHECKPOINT))?;
    }
    for (name, log) in &models.logs {
        log.write(out.join(format!("{name}.log.jsonl")))?;
    }
    let pool = main_error_pool(
        &validation_split(&cfg, &healthy),
        &models.main,
        &cfg.train.sampler,
        cfg.calibration_seed,
    )?;
    let cal = pool.calibrate(cfg.calibration_percentile)?;
    write_json(&out.join(CALIBRATION_FILE), &cal)?;
    println!("models written to {} (tau {:.4} at p{})", out.display(), cal.tau, cal.source_percentile);
    Ok(())
}

fn calibrate(cli: &Cli, models_dir: &Path, percentile: Option<f64>) -> CliResult<()> {
    let cfg = experiment_config(cli)?;
    let models = load_models(models_dir)?;
    let out = out_dir(cli, models_dir)?;
    let pool = calibration_pool(&cfg, &models.main)?;
    let cal = pool.calibrate(percentile.unwrap_or(cfg.calibration_percentile))?;
    write_json(&out.join(CALIBRATION_FILE), &cal)?;
    println!("tau {:.6} at p{} from {} errors", cal.tau, cal.source_percentile, cal.sample_count);
    Ok(())
}

fn read_png(path: &Path) -> CliResult<Slice<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = Plane::from_vec(h, w, img.into_raw().into_iter().map(f32::from).collect())?;
    let id = path.file_stem().map_or("slice".into(), |s| s.to_string_lossy().into_owned());
    Ok(slice_from_raw(&raw, id, 0, "unknown")?)
}

#[derive(Serialize)]
struct InferSummary {
    input: String,
    tau: f64,
    slices: Vec<SliceSummary>,
}

#[derive(Serialize)]
struct SliceSummary {
    slice_index: usize,
    iterations: usize,
    termination: Option<itermask::refinement::TerminationReason>,
    segmentation_area: usize,
    trace: String,
}

fn infer(
    cli: &Cli,
    models_dir: &Path,
    input: &Path,
    tau: Option<f64>,
    percentile: Option<f64>,
    min_brain_fraction: f64,
) -> CliResult<()> {
    let models = load_models(models_dir)?;
    let base = match &cli.config {
        Some(_) => experiment_config(cli)?.refinement,
        None => RefinementConfig {
            seed: cli.seed.unwrap_or(0),
            ..RefinementConfig::default()
        },
    };
    let cal = load_calibration(models_dir)?;
    let no_cal = || Error::Config(format!("{} has no {CALIBRATION_FILE}; pass --tau", models_dir.display()));
    let tau = match (tau, percentile) {
        (Some(t), _) => t,
        (None, Some(p)) => cal.ok_or_else(no_cal)?.tau_at(p)?,
        (None, None) => cal.ok_or_else(no_cal)?.tau,
    };
    let config = RefinementConfig {
        tau,
        radius: models.main.radius(),
        ..base
    };
    let out = out_dir(cli, Path::new("inference"))?;

    let name = input.to_string_lossy();
    let is_png = name.to_ascii_lowercase().ends_with(".png");
    let (slices, volume) = if is_png {
        (vec![read_png(input)?], None)
    } else {
        let v = load_volume(input)?;
        (extract_slices::<f32>(&v, Axis::K, min_brain_fraction), Some(v))
    };
    if slices.is_empty() {
        return Err(Error::invalid(format!("{name}: no slice has enough brain")).into());
    }

    let mut summaries = Vec::with_capacity(slices.len());
    let mut segs = Vec::with_capacity(slices.len());
    for s in &slices {
        let trace = run_refinement(s, &models.main, &models.init, &config)?;
        let rel = format!("traces/slice_{:03}", s.slice_index);
        export_trace(&trace, out.join(&rel))?;
        summaries.push(SliceSummary {
            slice_index: s.slice_index,
            iterations: trace.states.len(),
            termination: trace.termination_reason,
            segmentation_area: trace.final_segmentation.area(),
            trace: rel,
        });
        segs.push((s.slice_index, trace.final_segmentation));
    }
    match volume {
        Some(v) => {
            let (h, w, d) = v.data.dim();
            let mut masks = vec![SpatialMask::empty(h, w); d];
            for (k, m) in segs {
                masks[k] = m;
            }
            save_mask_volume(out.join("segmentation.nii.gz"), &masks, Some(&v.header))?;
        }
        None => {
            save_png(mask_image(&segs[0].1), out.join("segmentation.png"))?;
        }
    }
    write_json(
        &out.join("inference.json"),
        &InferSummary {
            input: name.into_owned(),
            tau,
            slices: summaries,
        },
    )?;
    println!("segmented {} slice(s) into {}", slices.len(), out.display());
    Ok(())
}

fn lesion_set(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<Vec<LabeledSlice<f32>>> {
    match data {
        Some(dir) => Ok(load_phantom_dataset::<f32>(dir)?.1),
        None => Ok(lesion_phantoms::<f32>(cfg)?),
    }
}

#[derive(Serialize)]
struct EvaluationSummary {
    tau: f64,
    images: usize,
    mean_dice: f64,
    mean_ssim: f64,
    mean_oracle_dice: f64,
    single_step_dice: Option<f64>,
    unguided_dice: Option<f64>,
}

fn evaluate(cli: &Cli, models_dir: &Path, data: Option<&Path>) -> CliResult<()> {
    let mut cfg = experiment_config(cli)?;
    cfg.sweep_percentiles.clear();
    let mut models = load_models(models_dir)?;
    check_radius(&cfg, &models)?;
    if !cfg.ablations {
        models.unguided = None;
    }
    let out = out_dir(cli, Path::new("evaluation"))?;
    persist_config(&out, &cfg)?;
    let healthy = healthy_phantoms::<f32>(&cfg)?;
    let lesions = lesion_set(&cfg, data)?;
    let result = evaluate_models(&cfg, &models, &healthy, &lesions)?;
    let table = result.report.to_table();
    write(&out.join("report.txt"), &table)?;
    write(&out.join("metrics.csv"), result.report.to_csv())?;
    let summary = EvaluationSummary {
        tau: result.tau,
        images: result.images.len(),
        mean_dice: result.mean_dice(),
        mean_ssim: result.mean_ssim(),
        mean_oracle_dice: mean(result.images.iter().map(|i| i.oracle_dice)),
        single_step_dice: result.ablations.as_ref().map(|a| mean(a.single_step.iter().copied())),
        unguided_dice: result.ablations.as_ref().map(|a| mean(a.unguided.iter().copied())),
    };
    write_json(&out.join("summary.json"), &summary)?;
    print!("{table}");
    if let (Some(s), Some(u)) = (summary.single_step_dice, summary.unguided_dice) {
        println!("ablations: single step {:.1}, unguided {:.1}", 100.0 * s, 100.0 * u);
    }
    Ok(())
}

fn sweep(cli: &Cli, models_dir: &Path, data: Option<&Path>) -> CliResult<()> {
    let cfg = experiment_config(cli)?;
    let models = load_models(models_dir)?;
    check_radius(&cfg, &models)?;
    let out = out_dir(cli, Path::new("sweep"))?;
    persist_config(&out, &cfg)?;
    let pool = calibration_pool(&cfg, &models.main)?;
    let lesions = lesion_set(&cfg, data)?;
    let rows = sensitivity_sweep_tau(
        &lesions,
        &models.main,
        &models.init,
        &pool,
        &cfg.sweep_percentiles,
        &cfg.refinement,
    )?;
    let mut csv = String::from("percentile,tau,mean_dice,count\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.setting, r.tau, r.mean_dice, r.count));
        println!("p{:<5} tau {:.4}  dice {:.3}", r.setting, r.tau, r.mean_dice);
    }
    write(&out.join("sweep.csv"), csv)?;
    write_json(&out.join("sweep.json"), &rows)
}

fn phantom(cli: &Cli, count: usize, lesion: bool) -> CliResult<()> {
    let mut spec = match &cli.config {
        Some(_) => experiment_config(cli)?.phantom,
        None => Default::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let spec = spec.with_lesion(lesion);
    let out = out_dir(cli, Path::new("phantoms"))?;
    let manifest = write_phantom_dataset(&out, &spec, count)?;
    println!("wrote {} phantom(s) to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn serve(cli: &Cli) -> CliResult<()> {
    let config = ServiceConfig::load(cli.config.as_deref())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Internal(e.to_string()))?;
    runtime
        .block_on(itermask_service::serve(config))
        .map_err(|e| Error::Internal(e.to_string()).into())
}

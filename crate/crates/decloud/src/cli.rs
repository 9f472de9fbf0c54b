//! Operator-facing command surface: `train`, `sample`, `evaluate`,
//! `analyze`, `resgap`, and `plot`, tied together by the TOML experiment
//! file. Flags override file values. Every command is deterministic given
//! its seed, never mutates an input dataset, and exits 0 on success, 1 on
//! user error, 2 on internal error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use decloud_core::batch::ImageBatch;
use decloud_core::cloud::{compute_ccp, threshold_cloud_mask};

use crate::bundle::DenoiserBundle;
use crate::config::ExperimentConfig;
use crate::data::{
    load_image, load_pair_dir, load_split, save_image, save_paired_splits, split_dataset,
    synth_dataset, unit_histogram, PairedDataset, CLOUD_DIR, MANIFEST_FILE,
};
use crate::device;
use crate::error::{Error, EXIT_USER};
use crate::metrics::{backend_by_name, evaluate_pairs, to_unit_scale, MetricReport};
use crate::plot::plot_csv;
use crate::reference::{build_reference, predict_reference, train_reference};
use crate::sampler::{sample, SampleMode, SamplerConfig};
use crate::training::{run_stage, Stage};

/// The inference-floor values swept by `evaluate --eta-sweep`.
pub const ETA_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Parser)]
#[command(
    name = "decloud",
    version,
    about = "Cloud removal by reference-guided diffusion: train, sample, and score"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the staged training pipeline and write checkpoints + loss logs.
    Train(TrainArgs),
    /// Remove clouds from one image with a trained checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on a paired dataset (PSNR/SSIM, optional extras).
    Evaluate(EvaluateArgs),
    /// Dataset statistics: per-image cloud coverage and its histogram.
    Analyze(AnalyzeArgs),
    /// Resolution-mismatch grid for the built-in reference baseline.
    Resgap(ResgapArgs),
    /// Render a numeric CSV produced by the other commands as a line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Ancestral,
    Ddim,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> SampleMode {
        match m {
            ModeArg::Ancestral => SampleMode::Ancestral,
            ModeArg::Ddim => SampleMode::Ddim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SwitchArg {
    On,
    Off,
}

impl SwitchArg {
    fn enabled(self) -> bool {
        self == SwitchArg::On
    }
    fn name(self) -> &'static str {
        match self {
            SwitchArg::On => "on",
            SwitchArg::Off => "off",
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Stage to run: cnp_small, wa_frozen, joint, or all.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Override the experiment seed (rederives every stream).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the dataset directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cloudy input image (png/tif).
    #[arg(long)]
    input: PathBuf,
    /// Where to write the cloud-free result.
    #[arg(long, default_value = "sample.png")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Ddim)]
    mode: ModeArg,
    /// Strided step count in ddim mode.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Weight floor applied at inference.
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    /// Fuse with the reference prediction, or run pure diffusion.
    #[arg(long, value_enum, default_value_t = SwitchArg::On)]
    fusion: SwitchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep per-step clean estimates unclipped.
    #[arg(long)]
    no_clip: bool,
    /// Write the step-by-step record here (JSON; a weight-trend CSV lands
    /// next to it).
    #[arg(long)]
    record_trajectory: Option<PathBuf>,
    /// Comma-separated steps t at which to save fused-estimate snapshots
    /// next to the output image.
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<usize>,
    /// Debug: replace the weighting output with a constant in [0, 1].
    #[arg(long)]
    weight_override: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (manifest or cloud/+label/ pair).
    #[arg(long)]
    dataset: PathBuf,
    /// Which part to score: test, train, or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "eval-out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Ddim)]
    mode: ModeArg,
    /// Strided step count in ddim mode.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Weight floor applied at inference.
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    /// Score every floor value in {0.1, 0.3, 0.5, 0.7, 0.9} instead of --eta.
    #[arg(long)]
    eta_sweep: bool,
    /// Fuse with the reference prediction (`off` for the ablation run).
    #[arg(long, value_enum, default_value_t = SwitchArg::On)]
    fusion: SwitchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// dB peak after outputs are mapped to [0, 1].
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Perceptual backend name (omit for PSNR/SSIM only).
    #[arg(long)]
    perceptual: Option<String>,
    /// Train fraction for datasets without a manifest.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Split shuffle seed for datasets without a manifest.
    #[arg(long, default_value_t = 17)]
    split_seed: u64,
    /// Meters per pixel assumed for datasets without a manifest.
    #[arg(long, default_value_t = 0.5)]
    resolution: f64,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Dataset directory (manifest or cloud/+label/ pair).
    #[arg(long)]
    dataset: PathBuf,
    /// Which part to analyze: all, train, or test.
    #[arg(long, default_value = "all")]
    split: String,
    /// Luminance threshold on [0, 1] above which a pixel counts as cloudy.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    /// Histogram bin count over [0, 1] coverage.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value = "analyze-out")]
    out_dir: PathBuf,
    /// Train fraction for datasets without a manifest.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Split shuffle seed for datasets without a manifest.
    #[arg(long, default_value_t = 17)]
    split_seed: u64,
    /// Meters per pixel assumed for datasets without a manifest.
    #[arg(long, default_value_t = 0.5)]
    resolution: f64,
}

#[derive(Debug, Args)]
struct ResgapArgs {
    /// Experiment file (TOML); supplies the dataset and baseline recipe.
    #[arg(long)]
    config: PathBuf,
    /// Training resolutions in meters per pixel, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0")]
    train_res: Vec<f64>,
    /// Test resolutions in meters per pixel, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0")]
    test_res: Vec<f64>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the baseline training iteration budget.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// CSV to render (first column x, remaining columns one series each).
    #[arg(long)]
    input: PathBuf,
    /// Chart image to write (png/tif).
    #[arg(long)]
    output: PathBuf,
    /// Chart height in pixels (power of two).
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Chart width in pixels (power of two).
    #[arg(long, default_value_t = 512)]
    width: usize,
}

/// Parse and run, surfacing failures as [`Error`]. The testable entry point.
pub fn run<I, T>(args: I) -> Result<(), Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    dispatch(cli)
}

/// Binary entry point: returns the process exit code and prints diagnostics.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USER,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Resgap(a) => cmd_resgap(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ckpt_dir(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("ckpt-{}", stage.name()))
}

/// Load the experiment's train/test pair, generating and saving the
/// synthetic dataset on first use when the config carries a recipe.
fn ensure_dataset(cfg: &ExperimentConfig) -> Result<(PairedDataset, PairedDataset), Error> {
    let dir = &cfg.data.dir;
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok((load_split(dir, Some("train"))?, load_split(dir, Some("test"))?));
    }
    if dir.join(CLOUD_DIR).is_dir() {
        let all = load_pair_dir(dir, cfg.data.nominal_resolution)?;
        return split_dataset(&all, cfg.data.train_ratio, cfg.data.split_seed);
    }
    let Some(synth) = &cfg.data.synth else {
        return Err(Error::MissingPrerequisite(format!(
            "no dataset at {} (no manifest, no {CLOUD_DIR}/ directory, and the config has no synthetic recipe)",
            dir.display()
        )));
    };
    let all = synth_dataset(synth)?;
    let (train, test) = split_dataset(&all, cfg.data.train_ratio, cfg.data.split_seed)?;
    save_paired_splits(&train, &test, dir)?;
    println!(
        "generated {} synthetic pairs under {} ({} train / {} test)",
        all.len(),
        dir.display(),
        train.len(),
        test.len()
    );
    Ok((train, test))
}

/// Load one part of a dataset addressed by directory only (no experiment
/// file): manifests carry their own split, bare pair directories are split
/// on the fly with the given ratio and seed.
fn load_eval_split(
    dir: &Path,
    split: &str,
    ratio: f64,
    seed: u64,
    resolution: f64,
) -> Result<PairedDataset, Error> {
    let want = match split {
        "all" => None,
        "train" | "test" => Some(split),
        other => {
            return Err(Error::Usage(format!(
                "unknown split '{other}' (known: train, test, all)"
            )))
        }
    };
    if dir.join(MANIFEST_FILE).is_file() {
        return load_split(dir, want);
    }
    if dir.join(CLOUD_DIR).is_dir() {
        let all = load_pair_dir(dir, resolution)?;
        return Ok(match want {
            None => all,
            Some("train") => split_dataset(&all, ratio, seed)?.0,
            Some(_) => split_dataset(&all, ratio, seed)?.1,
        });
    }
    Err(Error::MissingPrerequisite(format!(
        "no dataset at {} (neither {MANIFEST_FILE} nor a {CLOUD_DIR}/ directory)",
        dir.display()
    )))
}

fn reference_loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.reseed(seed);
    }
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(dir) = a.data_dir {
        cfg.data.dir = dir;
    }
    cfg.validate()?;
    let stages: Vec<Stage> = match a.stage.as_str() {
        "all" => Stage::all().to_vec(),
        one => vec![one.parse()?],
    };

    let device = device()?;
    let (train, _test) = ensure_dataset(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;

    // The first requested stage either starts fresh (and trains the
    // reference model once) or resumes from its prerequisite's checkpoint.
    let mut bundle = match stages[0].prerequisite() {
        None => {
            let bundle = DenoiserBundle::init(&cfg.bundle_spec(), cfg.seed, DType::F32, &device)?;
            if bundle.reference.trainable() {
                let (cloudy, clear) = train.stacked()?;
                let losses = train_reference(
                    bundle.reference.as_ref(),
                    &cloudy,
                    &clear,
                    &device,
                    &cfg.reference_train,
                )?;
                write_text(&cfg.out_dir.join("loss-reference.csv"), &reference_loss_csv(&losses))?;
                println!(
                    "reference model trained: {} iterations, final loss {:.6}",
                    losses.len(),
                    losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            bundle
        }
        Some(prev) => {
            let dir = ckpt_dir(&cfg.out_dir, prev);
            DenoiserBundle::load(&dir, &device).map_err(|e| match e {
                Error::MissingPrerequisite(msg) => Error::MissingPrerequisite(format!(
                    "stage {} needs a finished '{}' stage: {msg}",
                    stages[0], prev
                )),
                other => other,
            })?
        }
    };

    for stage in &stages {
        let scfg = cfg.stage_config(*stage);
        let resized = train.resized(scfg.image_size)?;
        let (cloudy, clear) = resized.stacked()?;
        let report = run_stage(&mut bundle, &cloudy, &clear, &scfg)?;
        let dir = ckpt_dir(&cfg.out_dir, *stage);
        bundle.save(&dir, stage.name())?;
        write_text(
            &cfg.out_dir.join(format!("loss-{}.csv", stage.name())),
            &report.to_csv(),
        )?;
        println!(
            "stage {stage}: {} iterations{}, checkpoint at {}",
            report.len(),
            if report.plateaued { " (plateaued)" } else { "" },
            dir.display()
        );
    }
    Ok(())
}

fn snapshot_path(output: &Path, t: usize) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("png");
    output.with_file_name(format!("{stem}-x0-t{t:04}.{ext}"))
}

fn cmd_sample(a: SampleArgs) -> Result<(), Error> {
    let device = device()?;
    let bundle = DenoiserBundle::load(&a.checkpoint, &device)?;
    let y = load_image(&a.input)?;
    let scfg = SamplerConfig {
        mode: a.mode.into(),
        ddim_steps: a.steps,
        eta: a.eta,
        fusion_enabled: a.fusion.enabled(),
        seed: a.seed,
        clip_x0: !a.no_clip,
        record_trajectory: a.record_trajectory.is_some() || !a.snapshots.is_empty(),
        snapshot_steps: a.snapshots.clone(),
        weight_override: a.weight_override,
    };
    let (out, trajectory) = sample(&bundle, &y, &scfg)?;
    save_image(&out, 0, &a.output)?;
    println!("wrote {}", a.output.display());

    if let Some(traj_path) = &a.record_trajectory {
        let json = serde_json::to_string_pretty(&trajectory)
            .map_err(|e| Error::Internal(format!("trajectory serialization: {e}")))?;
        write_text(traj_path, &json)?;
        let mut csv = String::from("step,mean_w,wall_ms\n");
        for i in 0..trajectory.len() {
            let _ = writeln!(
                csv,
                "{},{},{}",
                trajectory.steps[i], trajectory.mean_w[i], trajectory.wall_ms[i]
            );
        }
        write_text(&traj_path.with_extension("csv"), &csv)?;
        println!("wrote {}", traj_path.display());
    }
    for (t, snap) in &trajectory.snapshots {
        let path = snapshot_path(&a.output, *t);
        save_image(snap, 0, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// One evaluation pass over a dataset: per-image sampling with an
/// image-indexed noise stream, then pooled scoring on the [0, 1] scale.
fn evaluate_once(
    bundle: &DenoiserBundle,
    ds: &PairedDataset,
    base: &SamplerConfig,
    peak: f64,
    backend_name: Option<&str>,
) -> Result<MetricReport, Error> {
    let mut outputs = Vec::with_capacity(ds.len());
    let mut ids = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples().iter().enumerate() {
        let mut scfg = base.clone();
        scfg.seed = base.seed.wrapping_add(i as u64);
        let (out, _) = sample(bundle, &s.cloudy, &scfg)?;
        outputs.push(out);
        ids.push(s.id.clone());
    }
    let outputs = ImageBatch::stack(&outputs)?;
    let (_, truths) = ds.stacked()?;
    let backend = match backend_name {
        Some(name) => Some(backend_by_name(name)?),
        None => None,
    };
    evaluate_pairs(
        &to_unit_scale(&outputs),
        &to_unit_scale(&truths),
        &ids,
        peak,
        backend.as_deref(),
    )
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    checkpoint: String,
    dataset: String,
    split: String,
    mode: String,
    steps: usize,
    fusion: bool,
    eta: f64,
    count: usize,
    mean_psnr: f64,
    mean_ssim: f64,
    mean_lpips: Option<f64>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let device = device()?;
    let bundle = DenoiserBundle::load(&a.checkpoint, &device)?;
    let ds = load_eval_split(&a.dataset, &a.split, a.train_ratio, a.split_seed, a.resolution)?;
    if ds.is_empty() {
        return Err(Error::Data(format!(
            "nothing to evaluate: split '{}' of {} is empty",
            a.split,
            a.dataset.display()
        )));
    }
    // Surface band mismatches before any sampling starts.
    if let Some(bands) = ds.band_count() {
        if bands != bundle.meta.spec.bands {
            return Err(Error::Data(format!(
                "dataset has {bands} bands but the checkpoint expects {}",
                bundle.meta.spec.bands
            )));
        }
    }
    if let Some(name) = &a.perceptual {
        backend_by_name(name)?; // fail fast on unknown names
    }

    let base = SamplerConfig {
        mode: a.mode.into(),
        ddim_steps: a.steps,
        eta: a.eta,
        fusion_enabled: a.fusion.enabled(),
        seed: a.seed,
        clip_x0: true,
        record_trajectory: false,
        snapshot_steps: Vec::new(),
        weight_override: None,
    };
    let etas: Vec<f64> = if a.eta_sweep { ETA_SWEEP.to_vec() } else { vec![a.eta] };
    let tag = if a.eta_sweep {
        "eta-sweep".to_string()
    } else {
        format!("fusion-{}", a.fusion.name())
    };

    let mut summary_csv = String::from("eta,fusion,count,mean_psnr,mean_ssim,mean_lpips\n");
    let mut summaries = Vec::new();
    for eta in &etas {
        let mut scfg = base.clone();
        scfg.eta = *eta;
        let report = evaluate_once(&bundle, &ds, &scfg, a.peak, a.perceptual.as_deref())?;
        let run_tag = if a.eta_sweep { format!("eta-{eta:.1}") } else { tag.clone() };
        write_text(&a.out_dir.join(format!("images-{run_tag}.csv")), &report.to_csv())?;
        let _ = writeln!(
            summary_csv,
            "{},{},{},{},{},{}",
            eta,
            scfg.fusion_enabled,
            report.scores.len(),
            report.mean_psnr,
            report.mean_ssim,
            report.mean_lpips.map(|v| v.to_string()).unwrap_or_default()
        );
        summaries.push(EvalSummary {
            checkpoint: a.checkpoint.display().to_string(),
            dataset: a.dataset.display().to_string(),
            split: a.split.clone(),
            mode: format!("{}", base.mode),
            steps: a.steps,
            fusion: scfg.fusion_enabled,
            eta: *eta,
            count: report.scores.len(),
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
            mean_lpips: report.mean_lpips,
        });
    }
    write_text(&a.out_dir.join(format!("summary-{tag}.csv")), &summary_csv)?;
    let json = serde_json::to_string_pretty(&summaries)
        .map_err(|e| Error::Internal(format!("summary serialization: {e}")))?;
    write_text(&a.out_dir.join(format!("summary-{tag}.json")), &json)?;
    println!(
        "evaluated {} image(s) over {} run(s); reports under {}",
        ds.len(),
        etas.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Usage(format!(
            "threshold must lie in [0, 1], got {}",
            a.threshold
        )));
    }
    if a.bins == 0 {
        return Err(Error::Usage("bins must be positive".into()));
    }
    let ds = load_eval_split(&a.dataset, &a.split, a.train_ratio, a.split_seed, a.resolution)?;
    if ds.is_empty() {
        return Err(Error::Data(format!(
            "nothing to analyze: split '{}' of {} is empty",
            a.split,
            a.dataset.display()
        )));
    }
    let mut ccp_csv = String::from("id,ccp\n");
    let mut ccps = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let mask = threshold_cloud_mask(&s.cloudy.image(0), a.threshold);
        let ccp = compute_ccp(&mask).map_err(Error::from)?;
        let _ = writeln!(ccp_csv, "{},{ccp}", s.id);
        ccps.push(ccp);
    }
    let hist = unit_histogram(&ccps, a.bins)?;
    let mut hist_csv = String::from("bin_low,bin_high,count\n");
    for (i, count) in hist.iter().enumerate() {
        let lo = i as f64 / a.bins as f64;
        let hi = (i + 1) as f64 / a.bins as f64;
        let _ = writeln!(hist_csv, "{lo},{hi},{count}");
    }
    write_text(&a.out_dir.join("ccp.csv"), &ccp_csv)?;
    write_text(&a.out_dir.join("ccp-hist.csv"), &hist_csv)?;
    let mean = ccps.iter().sum::<f64>() / ccps.len() as f64;
    println!(
        "analyzed {} image(s); mean coverage {mean:.4}; reports under {}",
        ds.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_resgap(a: ResgapArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.reseed(seed);
    }
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(iters) = a.iterations {
        cfg.reference_train.iterations = iters;
    }
    cfg.validate()?;
    if a.train_res.is_empty() || a.test_res.is_empty() {
        return Err(Error::Usage(
            "need at least one training and one test resolution".into(),
        ));
    }

    let device = device()?;
    let (train, test) = ensure_dataset(&cfg)?;
    let native_res = train.samples()[0].nominal_resolution;
    let native_side = train.samples()[0].cloudy.height();
    let side_for = |res: f64| -> Result<usize, Error> {
        if !(res > 0.0) {
            return Err(Error::Usage(format!("resolution must be positive, got {res}")));
        }
        let exact = native_side as f64 * native_res / res;
        let side = exact.round();
        if (exact - side).abs() > 1e-9 || side < 1.0 || !(side as usize).is_power_of_two() {
            return Err(Error::Config(format!(
                "unsupported resolution ratio: {res} m/px maps {native_side} px at \
                 {native_res} m/px onto {exact} px (needs a whole power of two)"
            )));
        }
        Ok(side as usize)
    };

    let mut rows = String::from("train_res,test_res,count,mean_psnr,mean_ssim\n");
    for (i, train_res) in a.train_res.iter().enumerate() {
        let train_ds = train.resized(side_for(*train_res)?)?;
        let (cloudy, clear) = train_ds.stacked()?;
        let model = build_reference(
            &cfg.reference,
            cfg.bands,
            cfg.reference_train.seed ^ (i as u64),
            DType::F32,
            &device,
        )?;
        if model.trainable() {
            train_reference(model.as_ref(), &cloudy, &clear, &device, &cfg.reference_train)?;
        }
        for test_res in &a.test_res {
            let test_ds = test.resized(side_for(*test_res)?)?;
            let (test_cloudy, test_clear) = test_ds.stacked()?;
            let pred = predict_reference(model.as_ref(), &test_cloudy, &device)?;
            let ids: Vec<String> = test_ds.samples().iter().map(|s| s.id.clone()).collect();
            let report = evaluate_pairs(
                &to_unit_scale(&pred),
                &to_unit_scale(&test_clear),
                &ids,
                cfg.metrics.peak,
                None,
            )?;
            let _ = writeln!(
                rows,
                "{train_res},{test_res},{},{},{}",
                ids.len(),
                report.mean_psnr,
                report.mean_ssim
            );
        }
    }
    let path = cfg.out_dir.join("resgap.csv");
    write_text(&path, &rows)?;
    println!(
        "resolution grid: {} row(s) written to {}",
        a.train_res.len() * a.test_res.len(),
        path.display()
    );
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<(), Error> {
    plot_csv(&a.input, &a.output, a.height, a.width)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::networks::UNetSpec;
    use crate::reference::ReferenceSpec;

    /// Single-band micro experiment small enough for test budgets: six 16x16
    /// images, a 20-step chain, 4 strided inference steps, a handful of
    /// training iterations per stage.
    fn micro_config(root: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.bands = 1;
        cfg.out_dir = root.join("run");
        cfg.data.dir = root.join("data");
        cfg.schedule.steps = 20;
        cfg.sampler.ddim_steps = 4;
        cfg.cnp = UNetSpec::cnp_tiny(1);
        cfg.wa = UNetSpec::wa_tiny(1);
        cfg.reference = ReferenceSpec { name: "residual_cnn".into(), channels: 8, blocks: 1 };
        cfg.reference_train.iterations = 5;
        cfg.reference_train.batch_size = 2;
        cfg.data.synth = Some(SynthConfig {
            count: 6,
            image_size: 16,
            bands: 1,
            seed: 3,
            ..Default::default()
        });
        for (params, size) in [
            (&mut cfg.stages.cnp_small, 8),
            (&mut cfg.stages.wa_frozen, 16),
            (&mut cfg.stages.joint, 16),
        ] {
            params.image_size = size;
            params.batch_size = 2;
            params.iterations = 2;
            params.learning_rate = 1e-4;
        }
        cfg.normalize();
        cfg
    }

    fn arg(path: &Path) -> String {
        path.to_str().unwrap().to_string()
    }

    #[test]
    fn end_to_end_flow_train_sample_evaluate_analyze_plot() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        let cfg_path = tmp.path().join("exp.toml");
        cfg.save(&cfg_path).unwrap();

        run(["decloud", "train", "--config", &arg(&cfg_path)]).unwrap();
        for stage in Stage::all() {
            let dir = ckpt_dir(&cfg.out_dir, stage);
            assert!(dir.join("meta.json").is_file(), "missing checkpoint {dir:?}");
            assert!(
                cfg.out_dir.join(format!("loss-{}.csv", stage.name())).is_file(),
                "missing loss log for {stage}"
            );
        }
        assert!(cfg.out_dir.join("loss-reference.csv").is_file());
        assert!(cfg.data.dir.join(MANIFEST_FILE).is_file(), "dataset not materialized");

        // Sampling: output image, trajectory JSON + CSV, snapshots, and
        // byte-for-byte determinism under a fixed seed.
        let ckpt = ckpt_dir(&cfg.out_dir, Stage::Joint);
        let input = cfg.data.dir.join(CLOUD_DIR).join("synth-0000.tif");
        assert!(input.is_file(), "expected synthetic image at {input:?}");
        let out_png = tmp.path().join("out/clean.png");
        let traj = tmp.path().join("out/traj.json");
        let all_steps: Vec<String> = (1..=20).map(|t| t.to_string()).collect();
        run([
            "decloud",
            "sample",
            "--checkpoint",
            &arg(&ckpt),
            "--input",
            &arg(&input),
            "--output",
            &arg(&out_png),
            "--steps",
            "4",
            "--seed",
            "5",
            "--record-trajectory",
            &arg(&traj),
            "--snapshots",
            &all_steps.join(","),
        ])
        .unwrap();
        let cleaned = load_image(&out_png).unwrap();
        assert_eq!(cleaned.shape(), (1, 1, 16, 16));
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&traj).unwrap()).unwrap();
        let steps = record["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(record["mean_w"].as_array().unwrap().len(), 4);
        assert!(traj.with_extension("csv").is_file());
        for t in steps {
            let snap = snapshot_path(&out_png, t.as_u64().unwrap() as usize);
            assert!(snap.is_file(), "missing snapshot {snap:?}");
        }
        let out2 = tmp.path().join("out/clean2.png");
        run([
            "decloud",
            "sample",
            "--checkpoint",
            &arg(&ckpt),
            "--input",
            &arg(&input),
            "--output",
            &arg(&out2),
            "--steps",
            "4",
            "--seed",
            "5",
        ])
        .unwrap();
        assert_eq!(
            std::fs::read(&out_png).unwrap(),
            std::fs::read(&out2).unwrap(),
            "sampling must be deterministic under a fixed seed"
        );

        // Evaluation: the fusion toggle yields one summary row per run, the
        // η sweep five; reports carry finite numbers.
        let eval_dir = tmp.path().join("eval");
        for fusion in ["on", "off"] {
            run([
                "decloud",
                "evaluate",
                "--checkpoint",
                &arg(&ckpt),
                "--dataset",
                &arg(&cfg.data.dir),
                "--out-dir",
                &arg(&eval_dir),
                "--steps",
                "4",
                "--fusion",
                fusion,
            ])
            .unwrap();
        }
        for fusion in ["on", "off"] {
            let summary =
                std::fs::read_to_string(eval_dir.join(format!("summary-fusion-{fusion}.csv")))
                    .unwrap();
            let rows: Vec<&str> = summary.lines().collect();
            assert_eq!(rows.len(), 2, "one header + one row: {summary}");
            let psnr: f64 = rows[1].split(',').nth(3).unwrap().parse().unwrap();
            assert!(psnr.is_finite());
            assert!(eval_dir.join(format!("images-fusion-{fusion}.csv")).is_file());
        }

        run([
            "decloud",
            "evaluate",
            "--checkpoint",
            &arg(&ckpt),
            "--dataset",
            &arg(&cfg.data.dir),
            "--out-dir",
            &arg(&eval_dir),
            "--steps",
            "4",
            "--eta-sweep",
        ])
        .unwrap();
        let sweep = std::fs::read_to_string(eval_dir.join("summary-eta-sweep.csv")).unwrap();
        let rows: Vec<&str> = sweep.lines().collect();
        assert_eq!(rows.len(), 6, "header + five sweep rows: {sweep}");
        for (row, eta) in rows[1..].iter().zip(ETA_SWEEP) {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0].parse::<f64>().unwrap(), eta);
            assert!(cells[3].parse::<f64>().unwrap().is_finite());
            assert!(cells[4].parse::<f64>().unwrap().is_finite());
        }

        // Dataset analysis: one coverage row per image, a bins-row histogram
        // whose counts sum to the image count.
        let an_dir = tmp.path().join("analysis");
        run([
            "decloud",
            "analyze",
            "--dataset",
            &arg(&cfg.data.dir),
            "--out-dir",
            &arg(&an_dir),
            "--bins",
            "10",
        ])
        .unwrap();
        let ccp = std::fs::read_to_string(an_dir.join("ccp.csv")).unwrap();
        assert_eq!(ccp.lines().count(), 7, "header + six images: {ccp}");
        for line in ccp.lines().skip(1) {
            let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        let hist = std::fs::read_to_string(an_dir.join("ccp-hist.csv")).unwrap();
        let counts: usize = hist
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(hist.lines().count(), 11);
        assert_eq!(counts, 6);

        // Plot: loss curve CSV renders to a loadable chart.
        let chart = tmp.path().join("charts/loss.png");
        run([
            "decloud",
            "plot",
            "--input",
            &arg(&cfg.out_dir.join("loss-cnp_small.csv")),
            "--output",
            &arg(&chart),
        ])
        .unwrap();
        assert_eq!(load_image(&chart).unwrap().shape(), (1, 3, 256, 512));
    }

    #[test]
    fn later_stage_without_prerequisite_is_a_missing_prerequisite() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        let cfg_path = tmp.path().join("exp.toml");
        cfg.save(&cfg_path).unwrap();
        let err = run([
            "decloud",
            "train",
            "--config",
            &arg(&cfg_path),
            "--stage",
            "joint",
        ])
        .unwrap_err();
        match &err {
            Error::MissingPrerequisite(msg) => {
                assert!(msg.contains("wa_frozen"), "should name the missing stage: {msg}")
            }
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
        assert_eq!(err.exit_code(), EXIT_USER);
    }

    #[test]
    fn missing_config_file_is_named_in_the_error() {
        let err = run([
            "decloud",
            "train",
            "--config",
            "/no/such/place/exp.toml",
        ])
        .unwrap_err();
        assert!(err.to_string().contains("exp.toml"), "{err}");
        assert_eq!(err.exit_code(), EXIT_USER);
    }

    #[test]
    fn unknown_stage_and_bad_flags_are_usage_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro_config(tmp.path());
        let cfg_path = tmp.path().join("exp.toml");
        cfg.save(&cfg_path).unwrap();
        let err = run([
            "decloud",
            "train",
            "--config",
            &arg(&cfg_path),
            "--stage",
            "warmup",
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err:?}");

        let err = run(["decloud", "train"]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err:?}");

        let err = run(["decloud", "frobnicate"]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err:?}");
    }

    #[test]
    fn help_and_version_exit_zero_without_running_anything() {
        assert_eq!(main_with_args(["decloud", "--help"]), 0);
        assert_eq!(main_with_args(["decloud", "--version"]), 0);
        assert_eq!(main_with_args(["decloud", "train"]), EXIT_USER);
    }

    #[test]
    fn resolution_grid_has_one_row_per_train_test_combination() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(tmp.path());
        // 32-px natives so the coarse resolution still fits the 11-px
        // similarity window after downscaling.
        cfg.data.synth.as_mut().unwrap().image_size = 32;
        let cfg_path = tmp.path().join("exp.toml");
        cfg.save(&cfg_path).unwrap();

        run([
            "decloud",
            "resgap",
            "--config",
            &arg(&cfg_path),
            "--train-res",
            "0.5,1.0",
            "--test-res",
            "0.5,1.0",
            "--iterations",
            "4",
        ])
        .unwrap();
        let grid = std::fs::read_to_string(cfg.out_dir.join("resgap.csv")).unwrap();
        let rows: Vec<&str> = grid.lines().collect();
        assert_eq!(rows.len(), 5, "header + 2x2 grid: {grid}");
        for row in &rows[1..] {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells.len(), 5);
            assert!(cells[3].parse::<f64>().unwrap().is_finite());
        }

        // 1x1 grid runs end-to-end too.
        let single_out = tmp.path().join("single");
        run([
            "decloud",
            "resgap",
            "--config",
            &arg(&cfg_path),
            "--train-res",
            "0.5",
            "--test-res",
            "0.5",
            "--iterations",
            "2",
            "--out-dir",
            &arg(&single_out),
        ])
        .unwrap();
        let grid = std::fs::read_to_string(single_out.join("resgap.csv")).unwrap();
        assert_eq!(grid.lines().count(), 2);

        // A ratio that lands between pixel grids is refused.
        let err = run([
            "decloud",
            "resgap",
            "--config",
            &arg(&cfg_path),
            "--train-res",
            "0.7",
            "--test-res",
            "0.5",
        ])
        .unwrap_err();
        assert!(err.to_string().contains("resolution"), "{err}");
    }
}

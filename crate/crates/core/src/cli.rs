//! Command-line front end: `synth`, `preprocess`, `train`, `stain`, `eval`.
//!
//! [`run`] parses arguments, executes one command and returns the process
//! exit code, so the binary is a one-liner and tests can drive it in-process.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::MultiplexImage;
use crate::eval::{
    compare_markers, masked_modeling_eval, rows_to_csv, uncertainty_correlation, virtual_stain, virtual_stain_loo,
    ChannelMeanModel, MarkerComparison, StainModel, StainRow,
};
use crate::io::{load_dataset, load_truth, read_imxp, write_imxp, PanelManifest, IMAGE_DIR, MANIFEST_FILE};
use crate::preprocess::{compute_panel_stats, panel_normalize, stabilize_and_denoise, PreprocessConfig};
use crate::rng::stream;
use crate::synth::{write_cohort, CohortSpec};
use crate::trainer::{load_checkpoint, save_checkpoint, EpochMetrics, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mxvis", version, about = "Panel-flexible virtual staining for multiplex images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with ground-truth sidecars.
    Synth(SynthArgs),
    /// Arcsinh, Butterworth low-pass and panel-wise normalisation.
    Preprocess(PreprocessArgs),
    /// Masked-modelling training; writes a checkpoint.
    Train(TrainArgs),
    /// Predict target markers for one image (means, then log-variances).
    Stain(StainArgs),
    /// Leave-one-marker-out and calibration reports.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Cohort description (TOML); the built-in 12-marker cohort if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    cofactor: f64,
    #[arg(long, default_value_t = 2)]
    butter_order: u32,
    #[arg(long, default_value_t = 0.25)]
    butter_cutoff: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (TOML); missing keys take the full-scale
    /// defaults. Without a file the small desk preset is used.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue a run from a checkpoint until its configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed; 0 if neither is given.
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Per-epoch metrics as CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated marker names to predict.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<String>,
    /// Comma-separated input markers; every channel of the image by default.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Leave-one-marker-out staining against the channel-mean baseline.
    #[arg(long)]
    loo: bool,
    /// Uncertainty-error correlation and coverage under random masking.
    #[arg(long)]
    calibration: bool,
    /// Seed for the calibration masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Stain(a) => stain(a),
        Command::Eval(a) => eval(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => CohortSpec::from_toml(&read_text(p)?)?,
        None => CohortSpec::default(),
    };
    let n = write_cohort(&spec, a.seed, &a.out)?;
    log::info!("wrote {n} images to {}", a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = PreprocessConfig {
        cofactor: a.cofactor,
        butter_order: a.butter_order,
        butter_cutoff: a.butter_cutoff,
        ..PreprocessConfig::default()
    };
    cfg.validate()?;
    let data = load_dataset(&a.input)?;
    let mut stable = Vec::with_capacity(data.images.len());
    for (img, name) in data.images.iter().zip(&data.names) {
        stable.push(stabilize_and_denoise(&img.data, &cfg).with_context(|| format!("image {name}"))?);
    }
    let images = a.out.join(IMAGE_DIR);
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    PanelManifest::read(&a.input.join(MANIFEST_FILE))?.write(&a.out.join(MANIFEST_FILE))?;
    for p in 0..data.panels.len() {
        let members: Vec<usize> = (0..data.images.len()).filter(|&i| data.panel_of[i] == p).collect();
        if members.is_empty() {
            continue;
        }
        let stats = compute_panel_stats(members.iter().map(|&i| &stable[i]))?;
        log::info!("panel {p}: {} images, upper bound {}", members.len(), stats.upper_bound);
        for &i in &members {
            let img = MultiplexImage::new(data.images[i].markers.clone(), panel_normalize(&stable[i], &stats))?;
            write_imxp(&images.join(format!("{}.imxp", data.names[i])), &img)?;
        }
    }
    Ok(())
}

fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,nll,mae,mse,masked_mse,lr,grad_norm\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.nll, m.mae, m.mse, m.masked_mse, m.lr, m.grad_norm
        ));
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => toml::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::desk(),
            };
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Trainer::new(cfg, data.vocab.clone())?
        }
    };
    let metrics = trainer.run(&data)?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    if let Some(p) = &a.metrics {
        write_text(p, &metrics_csv(&metrics))?;
    }
    Ok(())
}

fn stain(a: StainArgs) -> Result<()> {
    let net = load_checkpoint(&a.ckpt)?.network()?;
    let image = read_imxp(&a.image)?;
    let inputs = if a.inputs.is_empty() { image.markers.clone() } else { a.inputs.clone() };
    let pred = virtual_stain(&net, &image, &inputs, &a.targets)?;
    let (c, h, w) = pred.mean.chw()?;
    let mut data = Vec::with_capacity(2 * c * h * w);
    data.extend_from_slice(pred.mean.data());
    data.extend_from_slice(pred.log_var.data());
    let markers = a
        .targets
        .iter()
        .map(|n| format!("{n}:mu"))
        .chain(a.targets.iter().map(|n| format!("{n}:logvar")))
        .collect();
    let out = MultiplexImage::new(markers, crate::tensor::Tensor::new(&[2 * c, h, w], data)?)?;
    write_imxp(&a.out, &out)?;
    Ok(())
}

fn comparisons_csv(rows: &[MarkerComparison]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
    let mut s = String::from("marker,pairs,mse,baseline_mse,p,q\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            r.marker,
            r.pairs,
            r.mean_mse,
            r.baseline_mse,
            opt(r.p),
            opt(r.q)
        ));
    }
    s
}

fn mean_of(rows: &[StainRow], f: impl Fn(&StainRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
}

fn eval(a: EvalArgs) -> Result<()> {
    let (loo, calibration) = if a.loo || a.calibration { (a.loo, a.calibration) } else { (true, true) };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mask = ckpt.config.mask;
    let net = ckpt.network()?;
    let data = load_dataset(&a.data)?;
    if data.vocab.names() != net.vocab().names() {
        bail!("dataset vocabulary {:?} differs from the checkpoint's {:?}", data.vocab.names(), net.vocab().names());
    }
    fs::create_dir_all(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    let mut summary = BTreeMap::new();
    summary.insert("images", json!(data.images.len()));

    if loo {
        let baseline = ChannelMeanModel::fit(&data)?;
        let (mut rows, mut base_rows) = (Vec::new(), Vec::new());
        let mut with_truth = 0;
        for (img, name) in data.images.iter().zip(&data.names) {
            let truth = load_truth(&a.data, name)?;
            with_truth += truth.is_some() as usize;
            let reference = truth.as_ref().map(|(clean, _)| &clean.data);
            rows.extend(virtual_stain_loo(&net, img, name, reference)?);
            base_rows.extend(virtual_stain_loo(&baseline as &dyn StainModel, img, name, reference)?);
        }
        let markers = compare_markers(&rows, &base_rows)?;
        write_text(&a.report.join("loo.csv"), &rows_to_csv(&rows))?;
        write_text(&a.report.join("loo_markers.csv"), &comparisons_csv(&markers))?;
        let mse = mean_of(&rows, |r| r.mse);
        let base = mean_of(&base_rows, |r| r.mse);
        summary.insert(
            "loo",
            json!({
                "rows": rows.len(),
                "reference": if with_truth == data.images.len() { "clean" } else { "observed" },
                "mse": mse,
                "mae": mean_of(&rows, |r| r.mae),
                "baseline_mse": base,
                "mse_ratio": mse / base,
                "markers_better_q05": markers.iter().filter(|m| m.q.is_some_and(|q| q < 0.05) && m.mean_mse < m.baseline_mse).count(),
            }),
        );
    }

    if calibration {
        let mut rows = Vec::new();
        for (i, (img, name)) in data.images.iter().zip(&data.names).enumerate() {
            let mut rng = stream(a.seed, &[i as u64]);
            rows.extend(masked_modeling_eval(&net, img, name, None, &mask, &mut rng)?);
        }
        write_text(&a.report.join("calibration.csv"), &rows_to_csv(&rows))?;
        let cal = uncertainty_correlation(&rows)?;
        summary.insert(
            "calibration",
            json!({
                "r_active": cal.active.r,
                "r_masked": cal.masked.r,
                "coverage": cal.coverage,
                "coverage_active": cal.active.coverage,
                "coverage_masked": cal.masked.coverage,
                "points_active": cal.active.points.len(),
                "points_masked": cal.masked.points.len(),
            }),
        );
    }
    let text = serde_json::to_string_pretty(&summary)?;
    write_text(&a.report.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

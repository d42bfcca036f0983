use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use hrfseg::data::{
    filter_annotated_samples, load_dataset, normalize_scan, read_image_png, rescale_bscan, write_image_png,
    write_mask_png, write_phantom, BScan, DatasetManifest, Grid, LabelMask, PhantomParams, Split, Vendor, VendorFilter,
};
use hrfseg::eval::{
    evaluate, read_pr_curve_csv, write_pr_curve_csv, Averaging, EvalReport, Prediction, DEFAULT_THRESHOLD,
};
use hrfseg::gradcheck::standard_suite;
use hrfseg::matrix::{run_matrix, MatrixSpec};
use hrfseg::plot::write_pr_svg;
use hrfseg::train::{predict, train, ValidationMode};
use hrfseg::{load_checkpoint, Architecture, Objective, OutputMode, TrainConfig};

use crate::header;

/// Command-line misuse detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "hrfseg", version, about = "Hyperreflective foci segmentation in retinal OCT")]
pub struct Cli {
    /// Log more (repeat for trace output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match (self.quiet, self.verbose) {
            (true, _) => "warn",
            (false, 0) => "info",
            (false, 1) => "debug",
            _ => "trace",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic OCT dataset with known foci.
    Synth(SynthArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a split, or run the full experiment matrix.
    Eval(EvalArgs),
    /// Predict the foreground probability map of one B-scan.
    Predict(PredictArgs),
    /// Overlay precision-recall curves in one SVG.
    Plot(PlotArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of B-scans.
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_vendor_filter, default_value = "both")]
    vendors: VendorFilter,
    #[arg(long, default_value_t = 5)]
    slices_per_scan: usize,
    #[arg(long, default_value_t = 0.03)]
    noise_std: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters shared by `train` and `eval --matrix`. Unset
/// flags fall back to the config file, then to the built-in defaults.
#[derive(Debug, Args)]
struct TrainFlags {
    /// TOML file with any subset of the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Patches per Adam step [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialisation and patch sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Patches drawn per training image per epoch [default: 50].
    #[arg(long)]
    patches_per_image: Option<usize>,
    /// Fixed patch count per epoch instead of a per-image budget.
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    /// Probability of centring a training patch on a focus pixel.
    #[arg(long)]
    foreground_bias: Option<f64>,
    /// Validate on this many fixed windows per image instead of full images.
    #[arg(long)]
    val_patches: Option<usize>,
    /// Output head: `binary_sigmoid` (one channel) or `softmax` (two channels).
    #[arg(long, value_parser = parse_out_mode)]
    out_mode: Option<OutputMode>,
    /// Probability threshold for DSC, precision and recall [default: 0.5].
    #[arg(long)]
    threshold: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patches_per_image {
            cfg.patches_per_image = v;
        }
        if self.patches_per_epoch.is_some() {
            cfg.patches_per_epoch = self.patches_per_epoch;
        }
        if let Some(v) = self.foreground_bias {
            cfg.foreground_bias = v;
        }
        if let Some(v) = self.val_patches {
            cfg.validation = ValidationMode::Patches { per_image: v };
        }
        if let Some(v) = self.out_mode {
            cfg.out_mode = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `semseg`, `resunet` or `resunet_plus` [default: resunet].
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    /// `ce` or `dice` [default: ce].
    #[arg(long, value_parser = parse_loss)]
    loss: Option<Objective>,
    /// `cirrus`, `spectralis` or `both` [default: both].
    #[arg(long, value_parser = parse_vendor_filter)]
    vendors: Option<VendorFilter>,
    #[command(flatten)]
    flags: TrainFlags,
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the checkpoint, log and run header.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to score (single-model mode).
    #[arg(long, required_unless_present = "matrix", conflicts_with = "matrix")]
    checkpoint: Option<PathBuf>,
    /// Train and score every architecture × loss × vendor cell.
    #[arg(long)]
    matrix: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Vendor selection; `eval --matrix` accepts a comma-separated list.
    #[arg(long, value_parser = parse_vendor_filter, value_delimiter = ',')]
    vendors: Vec<VendorFilter>,
    #[arg(long, value_parser = parse_arch, value_delimiter = ',')]
    archs: Vec<Architecture>,
    #[arg(long, value_parser = parse_loss, value_delimiter = ',')]
    losses: Vec<Objective>,
    #[arg(long, value_parser = parse_averaging, default_value = "pooled")]
    averaging: Averaging,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// B-scan PNG at the vendor's native geometry.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_vendor)]
    vendor: Vendor,
    /// Reject the checkpoint unless it holds this architecture.
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// `LABEL=PATH` of a PR-curve CSV; a bare path uses its file stem.
    #[arg(long = "curve")]
    curves: Vec<String>,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Also write the results as CSV into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_with<T: std::str::FromStr<Err = hrfseg::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: hrfseg::Error| e.to_string())
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    parse_with(s)
}

fn parse_loss(s: &str) -> std::result::Result<Objective, String> {
    parse_with(s)
}

fn parse_vendor_filter(s: &str) -> std::result::Result<VendorFilter, String> {
    parse_with(s)
}

fn parse_vendor(s: &str) -> std::result::Result<Vendor, String> {
    parse_with(s)
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    parse_with(s)
}

fn parse_out_mode(s: &str) -> std::result::Result<OutputMode, String> {
    parse_with(s)
}

fn parse_averaging(s: &str) -> std::result::Result<Averaging, String> {
    parse_with(s)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) if a.matrix => eval_matrix(a),
        Command::Eval(a) => eval_checkpoint(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Plot(a) => plot(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

#[derive(Serialize)]
struct SynthConfig {
    images: usize,
    slices_per_scan: usize,
    vendors: VendorFilter,
    noise_std: f64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = PhantomParams {
        images: a.images,
        slices_per_scan: a.slices_per_scan,
        vendors: a.vendors,
        noise_std: a.noise_std,
        seed: a.seed,
        ..PhantomParams::default()
    };
    let manifest = write_phantom(&params, &a.out)?;
    header::write(
        &a.out,
        "synth",
        Some(a.seed),
        Some(&SynthConfig {
            images: a.images,
            slices_per_scan: a.slices_per_scan,
            vendors: a.vendors,
            noise_std: a.noise_std,
        }),
    )?;
    info!("wrote {} B-scans to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.flags.resolve()?;
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.loss {
        cfg.loss = v;
    }
    if let Some(v) = a.vendors {
        cfg.vendors = v;
    }
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    header::write(&a.out, "train", Some(cfg.seed), Some(&cfg))?;
    let outcome = train(&cfg, &manifest, Some(&a.out))?;
    println!(
        "best epoch {} with validation AP {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_ap,
        outcome.checkpoint_path.as_deref().unwrap_or(Path::new("-")).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig {
    split: Split,
    vendors: VendorFilter,
    threshold: f64,
    averaging: Averaging,
    arch: Architecture,
    out_mode: OutputMode,
}

pub const EVAL_FILE: &str = "eval.csv";
pub const CURVE_FILE: &str = "pr_curve.csv";

fn eval_checkpoint(a: EvalArgs) -> Result<()> {
    let checkpoint = a
        .checkpoint
        .as_deref()
        .expect("clap requires --checkpoint without --matrix");
    if !a.archs.is_empty() || !a.losses.is_empty() {
        return Err(usage("--archs and --losses only apply to `eval --matrix`"));
    }
    let vendors = match a.vendors.as_slice() {
        [] => VendorFilter::Both,
        [v] => *v,
        _ => return Err(usage("single-checkpoint eval takes one --vendors value")),
    };
    let threshold = a.flags.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let manifest = read_manifest(&a.manifest)?;
    let samples = filter_annotated_samples(load_dataset(&manifest, vendors, &[a.split])?);
    if samples.is_empty() {
        bail!(hrfseg::Error::Data(format!(
            "no annotated {vendors} images in the {} split",
            a.split
        )));
    }
    let probs = samples
        .iter()
        .map(|s| predict(&model, &s.scan.pixels).map(Grid::into_data))
        .collect::<hrfseg::Result<Vec<_>>>()?;
    let preds: Vec<Prediction<'_>> = probs
        .iter()
        .zip(&samples)
        .map(|(p, s)| Prediction {
            probs: p,
            mask: s.mask.pixels().data(),
        })
        .collect();
    let report = evaluate(&preds, threshold, a.averaging)?;
    header::write(
        &a.out,
        "eval",
        Some(model.seed()),
        Some(&EvalConfig {
            split: a.split,
            vendors,
            threshold,
            averaging: a.averaging,
            arch: model.config().arch,
            out_mode: model.config().out_mode,
        }),
    )?;
    report.write_csv(&a.out.join(EVAL_FILE))?;
    write_pr_curve_csv(&report.curve, &a.out.join(CURVE_FILE))?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{}", EvalReport::CSV_HEADER.join("\t"));
    println!("{}", r.scores().map(|v| format!("{v:.4}")).join("\t"));
}

#[derive(Serialize)]
struct MatrixConfig<'a> {
    archs: Vec<&'a str>,
    losses: Vec<&'a str>,
    vendors: Vec<&'a str>,
    threshold: f64,
    averaging: Averaging,
    train: &'a TrainConfig,
}

fn eval_matrix(a: EvalArgs) -> Result<()> {
    if a.split != Split::Test {
        return Err(usage("`eval --matrix` always scores the test split"));
    }
    let base = a.flags.resolve()?;
    let defaults = MatrixSpec::default();
    let spec = MatrixSpec {
        archs: if a.archs.is_empty() {
            defaults.archs
        } else {
            a.archs.clone()
        },
        losses: if a.losses.is_empty() {
            defaults.losses
        } else {
            a.losses.clone()
        },
        vendors: if a.vendors.is_empty() {
            defaults.vendors
        } else {
            a.vendors.clone()
        },
    };
    let threshold = a.flags.threshold.unwrap_or(DEFAULT_THRESHOLD);
    base.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    header::write(
        &a.out,
        "eval-matrix",
        Some(base.seed),
        Some(&MatrixConfig {
            archs: spec.archs.iter().map(|x| x.tag()).collect(),
            losses: spec.losses.iter().map(|x| x.tag()).collect(),
            vendors: spec.vendors.iter().map(|x| x.tag()).collect(),
            threshold,
            averaging: a.averaging,
            train: &base,
        }),
    )?;
    let rows = run_matrix(
        &manifest,
        &spec,
        &|_, _, _| base.clone(),
        threshold,
        a.averaging,
        Some(&a.out),
    )?;
    println!("Train\tTest\tLoss\tModel\t{}", EvalReport::CSV_HEADER.join("\t"));
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            r.train_vendors,
            r.test_vendors,
            r.loss,
            r.arch,
            r.report.scores().map(|v| format!("{v:.4}")).join("\t")
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictConfig {
    vendor: Vendor,
    threshold: f64,
    arch: Architecture,
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        bail!(hrfseg::Error::Config(format!(
            "threshold must lie in (0,1), got {}",
            a.threshold
        )));
    }
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if let Some(arch) = a.arch {
        if model.config().arch != arch {
            bail!(hrfseg::Error::Checkpoint(format!(
                "checkpoint holds a {} model but {arch} was requested",
                model.config().arch
            )));
        }
    }
    let pixels = read_image_png(&a.input)?;
    let (rows, cols) = pixels.dims();
    let scan = BScan::native(pixels, a.vendor, "", "", 0)?;
    let (scan, _) = rescale_bscan(&scan, &LabelMask::zeros(rows, cols))?;
    let scan = normalize_scan(std::slice::from_ref(&scan))?.remove(0);
    let probs = predict(&model, &scan.pixels)?;
    let mut mask = LabelMask::zeros(probs.rows(), probs.cols());
    let mut scaled = probs.clone();
    for (i, (v, s)) in probs.data().iter().zip(scaled.data_mut()).enumerate() {
        *s = v * 65535.0;
        if f64::from(*v) >= a.threshold {
            mask.set(i / probs.cols(), i % probs.cols(), true);
        }
    }
    header::write(
        &a.out,
        "predict",
        Some(model.seed()),
        Some(&PredictConfig {
            vendor: a.vendor,
            threshold: a.threshold,
            arch: model.config().arch,
        }),
    )?;
    write_image_png(&a.out.join("probability.png"), &scaled)?;
    write_mask_png(&a.out.join("mask.png"), &mask)?;
    info!(
        "{} of {} pixels above {}",
        mask.positives(),
        probs.data().len(),
        a.threshold
    );
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    if a.curves.is_empty() {
        return Err(usage("plot needs at least one --curve"));
    }
    let mut curves = Vec::with_capacity(a.curves.len());
    for spec in &a.curves {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (stem, p)
            }
        };
        let curve = read_pr_curve_csv(&path).with_context(|| format!("reading curve {}", path.display()))?;
        curves.push((label, curve));
    }
    write_pr_svg(&curves, &a.out)?;
    info!("plotted {} curve(s) to {}", curves.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = standard_suite(a.seed)?;
    let mut failed = Vec::new();
    let mut csv = String::from("case,max_relative_error,checked,skipped_kinks,pass\n");
    for c in &cases {
        let pass = c.report.passes(a.tolerance);
        println!(
            "{:<36} {:>10.3e}  checked {:>4}  skipped {:>3}  {}",
            c.name,
            c.report.max_relative_error,
            c.report.checked,
            c.report.skipped_kinks,
            if pass { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name, c.report.max_relative_error, c.report.checked, c.report.skipped_kinks, pass
        ));
        if !pass {
            failed.push(c.name.as_str());
        }
    }
    if let Some(dir) = &a.out {
        #[derive(Serialize)]
        struct GradcheckConfig {
            tolerance: f64,
        }
        header::write(
            dir,
            "gradcheck",
            Some(a.seed),
            Some(&GradcheckConfig { tolerance: a.tolerance }),
        )?;
        std::fs::write(dir.join("gradcheck.csv"), csv)?;
    }
    if !failed.is_empty() {
        bail!(
            "gradient check failed for {} (tolerance {})",
            failed.join(", "),
            a.tolerance
        );
    }
    Ok(())
}

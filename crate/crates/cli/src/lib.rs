//! Command-line front end. Every command merges its settings from defaults,
//! an optional `--config` JSON file and flags, in that order.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ppn::bench::{self, Detector};
use ppn::eval::{flux_bin_edges, linspace, EvalReport};
use ppn::experiment::{self, ArtifactWriter, ExperimentConfig};
use ppn::floodfill::{threshold_blob_detect, Connectivity};
use ppn::image::{meta_path_for, ImageMeta};
use ppn::infer::{detect, InferConfig};
use ppn::net::{self, Model};
use ppn::skysim::{density_scaled_sources, simulate, SimConfig};
use ppn::train::write_history;
use ppn::{Catalog, CatalogKind, Image};

pub use config::{RunConfig, Source};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] ppn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(ppn::Error::InvalidArgument { .. } | ppn::Error::Config { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ppn", version, about = "Point-source detection with a point proposal network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sky images with truth catalogs.
    Simulate(SimulateArgs),
    /// Train a model on simulated patches.
    Train(TrainArgs),
    /// Detect sources with a trained model.
    Detect(DetectArgs),
    /// Detect sources with the single-threshold flood-fill baseline.
    DetectBaseline(BaselineArgs),
    /// Score a detection catalog against truth.
    Evaluate(EvaluateArgs),
    /// Time detectors over a ladder of image sizes.
    Bench(BenchArgs),
    /// Summarise a timing CSV as tables and curves.
    BenchReport(BenchReportArgs),
    /// Run a named experiment and write its reports under --out.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct Common {
    /// JSON settings file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Print the effective settings as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn put<T: Serialize>(rc: &mut RunConfig, key: &str, value: &Option<T>, flag: &str) {
    if let Some(v) = value {
        rc.set_flag(key, serde_json::to_value(v).expect("flag serialises"), flag);
    }
}

/// Builds the run config, or prints it and returns `None` under `--print-config`.
fn prepare<T>(common: &Common, flags: impl FnOnce(&mut RunConfig)) -> CliResult<Option<(T, RunConfig)>>
where
    T: Serialize + Default + for<'de> Deserialize<'de>,
{
    let mut rc = RunConfig::from_defaults::<T>();
    if let Some(p) = &common.config {
        rc.apply_file(p)?;
    }
    flags(&mut rc);
    let settings = rc.settings::<T>()?;
    if common.print_config {
        print!("{}", rc.to_json());
        for (key, value, source) in rc.provenance() {
            eprintln!("{key} = {value} ({source})");
        }
        return Ok(None);
    }
    Ok(Some((settings, rc)))
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required setting {flag}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_range(text: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("invalid range `{text}`, expected LO:HI"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// `LO:HI:N` evenly spaced values, both ends included.
pub fn parse_sweep(text: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Usage(format!("invalid sweep `{text}`, expected LO:HI:N"));
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !(lo <= hi) {
        return Err(bad());
    }
    Ok(linspace(lo, hi, n))
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Per-image source count drawn uniformly from LO:HI.
    #[arg(long, value_name = "LO:HI")]
    sources: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    psf_fwhm: Option<f64>,
    #[arg(long)]
    flux_bins: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub out: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    /// `LO:HI`; the density default applies when absent.
    pub sources: Option<String>,
    pub seed: u64,
    pub sigma: f64,
    pub psf_fwhm: f64,
    pub flux_bins: usize,
    pub allow_overlap: bool,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            out: None,
            count: 1,
            size: sim.image_size,
            sources: None,
            seed: 0,
            sigma: sim.sigma,
            psf_fwhm: sim.psf_fwhm,
            flux_bins: sim.n_bins,
            allow_overlap: sim.allow_overlap,
        }
    }
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<SimulateSettings>(&a.common, |rc| {
        put(rc, "out", &a.out, "--out");
        put(rc, "count", &a.count, "--count");
        put(rc, "size", &a.size, "--size");
        put(rc, "sources", &a.sources, "--sources");
        put(rc, "seed", &a.seed, "--seed");
        put(rc, "sigma", &a.sigma, "--sigma");
        put(rc, "psf_fwhm", &a.psf_fwhm, "--psf-fwhm");
        put(rc, "flux_bins", &a.flux_bins, "--flux-bins");
    })?
    else {
        return Ok(());
    };
    let dir = require(&s.out, "--out")?;
    let range = s.sources.as_deref().map(parse_range).transpose()?;
    create_dir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for k in 0..s.count {
        let n_sources = match range {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => density_scaled_sources(s.size),
        };
        let cfg = SimConfig {
            image_size: s.size,
            n_sources,
            n_bins: s.flux_bins,
            sigma: s.sigma,
            psf_fwhm: s.psf_fwhm,
            seed: s.seed + k as u64,
            allow_overlap: s.allow_overlap,
        };
        let (image, truth) = simulate(&cfg)?;
        let path = dir.join(format!("img_{k:05}.ppn"));
        image.write(&path)?;
        truth.write_csv(dir.join(format!("img_{k:05}.truth.csv")))?;
        ImageMeta {
            rms_sigma: image.rms_sigma,
            seed: Some(cfg.seed),
        }
        .write(meta_path_for(&path))?;
    }
    println!("simulated {} image(s) into {}", s.count, dir.display());
    Ok(())
}

// ---------------------------------------------------------------- train

/// Flags shared by `train` and `experiment`, all targeting `experiment.*`.
#[derive(Args)]
struct SetupFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Residual base depth (9, 17 or 31).
    #[arg(long)]
    depth: Option<usize>,
    /// Multiplier on the reference channel widths.
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    train_patches: Option<usize>,
    #[arg(long)]
    val_patches: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

impl SetupFlags {
    fn apply(&self, rc: &mut RunConfig) {
        put(rc, "experiment.seed", &self.seed, "--seed");
        put(rc, "experiment.base_depth", &self.depth, "--depth");
        put(rc, "experiment.width_factor", &self.width, "--width");
        put(rc, "experiment.train.epochs", &self.epochs, "--epochs");
        put(rc, "experiment.train.batch_size", &self.batch_size, "--batch-size");
        put(rc, "experiment.train.learning_rate", &self.learning_rate, "--learning-rate");
        put(rc, "experiment.train.alpha", &self.alpha, "--alpha");
        put(rc, "experiment.train.gamma", &self.gamma, "--gamma");
        put(rc, "experiment.train_patches", &self.train_patches, "--train-patches");
        put(rc, "experiment.val_patches", &self.val_patches, "--val-patches");
        put(rc, "experiment.test_images", &self.test_images, "--test-images");
        if let Some(size) = self.image_size {
            rc.set_flag("experiment.sim.image_size", Value::from(size), "--image-size");
            let n = density_scaled_sources(size);
            rc.set_flag("experiment.sim.n_sources", Value::from(n), "--image-size");
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss history CSV; defaults to the model path with `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    setup: SetupFlags,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<TrainSettings>(&a.common, |rc| {
        put(rc, "out", &a.out, "--out");
        put(rc, "history", &a.history, "--history");
        a.setup.apply(rc);
    })?
    else {
        return Ok(());
    };
    let out = require(&s.out, "--out")?;
    let cfg = &s.experiment;
    cfg.validate()?;
    let (train, val) = experiment::training_sets(cfg)?;
    let outcome = experiment::train_model(cfg, &train, &val, cfg.train.alpha, cfg.train.gamma)?;
    net::save(&outcome.model, out)?;
    let history = s.history.clone().unwrap_or_else(|| out.with_extension("history.csv"));
    write_history(&history, &outcome.history)?;
    println!(
        "saved {} (best epoch {}, validation loss {:.6}); history in {}",
        out.display(),
        outcome.best_epoch,
        outcome.best_val_loss(),
        history.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- detect

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    r_nms: Option<f64>,
    #[arg(long)]
    c_nms: Option<f64>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSettings {
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub infer: InferConfig,
}

fn cmd_detect(a: &DetectArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<DetectSettings>(&a.common, |rc| {
        put(rc, "model", &a.model, "--model");
        put(rc, "image", &a.image, "--image");
        put(rc, "out", &a.out, "--out");
        put(rc, "infer.r_nms", &a.r_nms, "--r-nms");
        put(rc, "infer.c_nms", &a.c_nms, "--c-nms");
        put(rc, "infer.overlap", &a.overlap, "--overlap");
        put(rc, "infer.batch_size", &a.batch_size, "--batch-size");
    })?
    else {
        return Ok(());
    };
    let model_path = require(&s.model, "--model")?;
    let image = Image::read(require(&s.image, "--image")?)?;
    let out = require(&s.out, "--out")?;
    let model = net::load(model_path)?;
    let found = detect(&model, &image, &s.infer)?;
    found.write_csv(out)?;
    println!("{} detection(s) written to {}", found.len(), out.display());
    Ok(())
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long, value_enum)]
    connectivity: Option<ConnectivityArg>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ConnectivityArg {
    Four,
    Eight,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub image: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub tau: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            image: None,
            out: None,
            tau: 0.5,
            min_area: 3,
            connectivity: Connectivity::default(),
        }
    }
}

fn cmd_detect_baseline(a: &BaselineArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<BaselineSettings>(&a.common, |rc| {
        put(rc, "image", &a.image, "--image");
        put(rc, "out", &a.out, "--out");
        put(rc, "tau", &a.tau, "--tau");
        put(rc, "min_area", &a.min_area, "--min-area");
        put(rc, "connectivity", &a.connectivity, "--connectivity");
    })?
    else {
        return Ok(());
    };
    let image = Image::read(require(&s.image, "--image")?)?;
    let out = require(&s.out, "--out")?;
    let found = threshold_blob_detect(&image, s.tau, s.min_area, s.connectivity)?;
    found.write_csv(out)?;
    println!("{} detection(s) written to {}", found.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Matching radius in grid units.
    #[arg(long)]
    r_tp: Option<f64>,
    #[arg(long)]
    flux_bins: Option<usize>,
    /// Background rms in the truth catalog's flux units.
    #[arg(long)]
    sigma: Option<f64>,
    /// Grid spacing in pixels.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, value_name = "LO:HI:N")]
    rtp_sweep: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub r_tp: f64,
    pub flux_bins: usize,
    pub sigma: f64,
    pub spacing: f64,
    pub rtp_sweep: String,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            pred: None,
            truth: None,
            out: None,
            r_tp: 0.4,
            flux_bins: SimConfig::default().n_bins,
            sigma: SimConfig::default().sigma,
            spacing: 32.0,
            rtp_sweep: "0.05:1.0:20".into(),
        }
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<EvaluateSettings>(&a.common, |rc| {
        put(rc, "pred", &a.pred, "--pred");
        put(rc, "truth", &a.truth, "--truth");
        put(rc, "out", &a.out, "--out");
        put(rc, "r_tp", &a.r_tp, "--r-tp");
        put(rc, "flux_bins", &a.flux_bins, "--flux-bins");
        put(rc, "sigma", &a.sigma, "--sigma");
        put(rc, "spacing", &a.spacing, "--spacing");
        put(rc, "rtp_sweep", &a.rtp_sweep, "--rtp-sweep");
    })?
    else {
        return Ok(());
    };
    let radii = parse_sweep(&s.rtp_sweep)?;
    let out = require(&s.out, "--out")?;
    let pred = Catalog::read_csv(require(&s.pred, "--pred")?, CatalogKind::Detection)?;
    let truth = Catalog::read_csv(require(&s.truth, "--truth")?, CatalogKind::Truth)?;
    let edges = flux_bin_edges(s.flux_bins, s.sigma);
    let report = EvalReport::build(&pred.records, &truth.records, s.r_tp, s.spacing, &edges, &radii);
    let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_text(out, &text)?;
    println!(
        "precision {:.4} recall {:.4} f1 {:.4}; report in {}",
        report.precision,
        report.recall,
        report.f1,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorChoice {
    Ppn,
    Baseline,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    detector: Option<DetectorChoice>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Sizes 1024 to 16384 in steps of 1024.
    #[arg(long)]
    full_ladder: bool,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trained model; an untrained model of the configured architecture is timed otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub detector: DetectorChoice,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub base_depth: usize,
    pub width_factor: f64,
    pub infer: InferConfig,
    pub tau: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        let baseline = BaselineSettings::default();
        Self {
            detector: DetectorChoice::Both,
            sizes: exp.bench_sizes,
            repeats: 50,
            seed: 0,
            model: None,
            out: None,
            base_depth: exp.base_depth,
            width_factor: exp.width_factor,
            infer: exp.infer,
            tau: baseline.tau,
            min_area: baseline.min_area,
            connectivity: baseline.connectivity,
        }
    }
}

fn model_or_untrained(path: Option<&Path>, depth: usize, width: f64, seed: u64) -> CliResult<Model<f32>> {
    match path {
        Some(p) => Ok(net::load(p)?),
        None => {
            let cfg = ExperimentConfig {
                base_depth: depth,
                width_factor: width,
                ..ExperimentConfig::default()
            };
            Ok(Model::build(&cfg.net()?, seed)?)
        }
    }
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let full: Option<Vec<usize>> = a.full_ladder.then(|| (1..=16).map(|k| k * 1024).collect());
    let Some((s, _)) = prepare::<BenchSettings>(&a.common, |rc| {
        put(rc, "detector", &a.detector, "--detector");
        put(rc, "sizes", &full, "--full-ladder");
        put(rc, "sizes", &a.sizes, "--sizes");
        put(rc, "repeats", &a.repeats, "--repeats");
        put(rc, "seed", &a.seed, "--seed");
        put(rc, "model", &a.model, "--model");
        put(rc, "out", &a.out, "--out");
    })?
    else {
        return Ok(());
    };
    let out = require(&s.out, "--out")?;
    let model;
    let mut detectors = Vec::new();
    if s.detector != DetectorChoice::Baseline {
        model = model_or_untrained(s.model.as_deref(), s.base_depth, s.width_factor, s.seed)?;
        detectors.push(Detector::Ppn {
            model: &model,
            config: s.infer,
        });
    }
    if s.detector != DetectorChoice::Ppn {
        detectors.push(Detector::Baseline {
            tau: s.tau,
            min_area: s.min_area,
            connectivity: s.connectivity,
        });
    }
    let records = bench::scaling_run(&detectors, &s.sizes, s.repeats, s.seed)?;
    bench::write_csv(out, &records)?;
    println!("{} timing row(s) written to {}", records.len(), out.display());
    Ok(())
}

#[derive(Args)]
struct BenchReportArgs {
    #[command(flatten)]
    common: Common,
    /// Timing CSV produced by `bench`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory receiving `table.md` and `curves.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchReportSettings {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn cmd_bench_report(a: &BenchReportArgs) -> CliResult<()> {
    let Some((s, _)) = prepare::<BenchReportSettings>(&a.common, |rc| {
        put(rc, "input", &a.input, "--input");
        put(rc, "out", &a.out, "--out");
    })?
    else {
        return Ok(());
    };
    let records = bench::read_csv(require(&s.input, "--input")?)?;
    let dir = require(&s.out, "--out")?;
    create_dir(dir)?;
    let summary = bench::summarize(&records);
    let table = bench::report_table(&summary);
    write_text(&dir.join("table.md"), &table)?;
    write_text(&dir.join("curves.csv"), &bench::report_curves(&summary))?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------- experiment

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    FocalSweep,
    RnmsSweep,
    Accuracy,
    Speed,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: ExperimentName,
    #[command(flatten)]
    common: Common,
    /// Output directory; receives the reports and `manifest.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained model, required by rnms-sweep and accuracy.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    r_nms: Option<f64>,
    #[command(flatten)]
    setup: SetupFlags,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            out: PathBuf::from("results"),
            model: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn trained_model(path: Option<&Path>) -> CliResult<Model<f32>> {
    let p = path.ok_or_else(|| {
        ppn::Error::Prerequisite("this experiment needs a trained model; run `ppn train --out model.ppnmodel` and pass `--model model.ppnmodel`".into())
    })?;
    if !p.exists() {
        return Err(ppn::Error::Prerequisite(format!(
            "no trained model at {}; run `ppn train --out {}` first",
            p.display(),
            p.display()
        ))
        .into());
    }
    Ok(net::load(p)?)
}

fn cmd_experiment(a: &ExperimentArgs) -> CliResult<()> {
    let Some((s, rc)) = prepare::<ExperimentSettings>(&a.common, |rc| {
        put(rc, "out", &a.out, "--out");
        put(rc, "model", &a.model, "--model");
        put(rc, "experiment.bench_sizes", &a.sizes, "--sizes");
        put(rc, "experiment.bench_repeats", &a.repeats, "--repeats");
        put(rc, "experiment.infer.r_nms", &a.r_nms, "--r-nms");
        a.setup.apply(rc);
    })?
    else {
        return Ok(());
    };
    let cfg = &s.experiment;
    cfg.validate()?;
    let label = a.name.to_possible_value().expect("named").get_name().to_string();
    let mut w = ArtifactWriter::new(&s.out, &label, rc.embedded())?;
    match a.name {
        ExperimentName::FocalSweep => {
            let data = experiment::build_datasets(cfg)?;
            let rows = experiment::focal_sweep(cfg, &data)?;
            w.json("focal_sweep.json", &rows)?;
            w.text("focal_sweep.md", &experiment::focal_table(&rows))?;
        }
        ExperimentName::RnmsSweep => {
            let model = trained_model(s.model.as_deref())?;
            let test = experiment::test_images(cfg)?;
            let proposals = experiment::test_proposals(&model, &test, &cfg.infer)?;
            let rows = experiment::rnms_sweep_from_proposals(&proposals, &test, cfg, &cfg.rnms_sweep, model.grid().spacing());
            w.json("rnms_sweep.json", &rows)?;
            w.text("rnms_sweep.csv", &experiment::rnms_csv(&rows))?;
        }
        ExperimentName::Accuracy => {
            let model = trained_model(s.model.as_deref())?;
            let test = experiment::test_images(cfg)?;
            let proposals = experiment::test_proposals(&model, &test, &cfg.infer)?;
            let spacing = model.grid().spacing();
            let main = experiment::accuracy_from_proposals(&proposals, &test, cfg, cfg.infer.r_nms, spacing);
            let alt = experiment::accuracy_from_proposals(&proposals, &test, cfg, cfg.r_nms_alt, spacing);
            w.json("accuracy.json", &[&main, &alt])?;
            w.text("accuracy.md", &experiment::accuracy_table(&[&main, &alt]))?;
        }
        ExperimentName::Speed => {
            let model = model_or_untrained(s.model.as_deref(), cfg.base_depth, cfg.width_factor, cfg.seed)?;
            let (records, summary) = experiment::speed(&model, cfg)?;
            w.text("timings.csv", &bench::to_csv(&records))?;
            w.json("speed.json", &summary)?;
            w.text("speed.md", &bench::report_table(&summary))?;
            w.text("speed_curves.csv", &bench::report_curves(&summary))?;
        }
    }
    let manifest = w.finish()?;
    println!("{label}: reports listed in {}", manifest.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::DetectBaseline(a) => cmd_detect_baseline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::BenchReport(a) => cmd_bench_report(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Runs one command. `argv` excludes the program name. Returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("ppn")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

//! Experiment orchestration: dataset construction, training runs, accuracy
//! and suppression-radius studies, focal-parameter sweeps and timing ladders.
//! Every function here is a thin composition of the library operations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{self, Detector, SummaryRow, TimingRecord};
use crate::catalog::{Catalog, PointRecord};
use crate::error::{Error, Result};
use crate::eval::{self, flux_bin_edges, match_points, tally_bins, FluxBin};
use crate::image::Image;
use crate::infer::{nms, propose, InferConfig};
use crate::net::model::{Model, NetConfig};
use crate::skysim::{simulate, SimConfig};
use crate::train::{self, simulated_samples, Sample, TrainConfig, TrainOutcome};

/// Seed offsets separating the training, validation and test image streams.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;
pub const TEST_SEED_OFFSET: u64 = 2_000_000;

/// Defaults are the desk-scale setup: half the reference channel widths and a
/// quarter-size batch, sized for a single CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub base_depth: usize,
    /// Multiplier on the reference channel widths.
    pub width_factor: f64,
    pub sim: SimConfig,
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_images: usize,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Matching radius for headline metrics, grid units.
    pub r_tp: f64,
    pub rtp_sweep: Vec<f64>,
    pub rnms_sweep: Vec<f64>,
    /// Second suppression radius reported by the accuracy study.
    pub r_nms_alt: f64,
    pub focal_gammas: Vec<f64>,
    pub focal_alphas: Vec<f64>,
    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_depth: 9,
            width_factor: 0.5,
            sim: SimConfig::default(),
            train_patches: 4096,
            val_patches: 256,
            test_images: 10,
            train: TrainConfig {
                batch_size: 32,
                epochs: 25,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
            r_tp: 0.4,
            rtp_sweep: vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.40, 0.50, 1.00],
            rnms_sweep: (2..=20).map(|k| k as f64 / 20.0).collect(),
            r_nms_alt: 0.8,
            focal_gammas: vec![0.0, 1.0, 2.0],
            focal_alphas: vec![0.5, 1.0, 2.0],
            bench_sizes: vec![1024, 2048, 3072, 4096],
            bench_repeats: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn net(&self) -> Result<NetConfig> {
        if !(self.width_factor > 0.0) {
            return Err(Error::config("width_factor", "must be positive"));
        }
        Ok(NetConfig::resnet(self.base_depth)?.scaled_widths(self.width_factor))
    }

    pub fn validate(&self) -> Result<()> {
        self.net()?.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.train_patches == 0 || self.val_patches == 0 || self.test_images == 0 {
            return Err(Error::config("train_patches", "dataset sizes must be positive"));
        }
        Ok(())
    }
}

/// Training and validation patches plus whole test images with truth.
pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<(Image, Catalog)>,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let (train, val) = training_sets(cfg)?;
    let test = test_images(cfg)?;
    Ok(Datasets { train, val, test })
}

/// Training and validation patches cut from independent simulated images.
pub fn training_sets(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let patch = cfg.net()?.input_size;
    let overlap = cfg.infer.overlap;
    let train = simulated_samples(&cfg.sim, cfg.train_patches, patch, overlap, cfg.seed)?;
    let val = simulated_samples(&cfg.sim, cfg.val_patches, patch, overlap, cfg.seed + VAL_SEED_OFFSET)?;
    Ok((train, val))
}

pub fn test_images(cfg: &ExperimentConfig) -> Result<Vec<(Image, Catalog)>> {
    (0..cfg.test_images as u64)
        .map(|k| {
            simulate(&SimConfig {
                seed: cfg.seed + TEST_SEED_OFFSET + k,
                ..cfg.sim.clone()
            })
        })
        .collect()
}

/// Builds and trains a model with the given focal parameters.
pub fn train_model(cfg: &ExperimentConfig, train: &[Sample], val: &[Sample], alpha: f64, gamma: f64) -> Result<TrainOutcome<f32>> {
    let model = Model::<f32>::build(&cfg.net()?, cfg.seed)?;
    let tc = TrainConfig {
        alpha,
        gamma,
        ..cfg.train.clone()
    };
    train::train(model, train, val, &tc)
}

/// Raw, unsuppressed proposals for each test image. Suppression studies
/// reuse these so the network runs once per image.
pub fn test_proposals(model: &Model<f32>, test: &[(Image, Catalog)], infer: &InferConfig) -> Result<Vec<Vec<PointRecord>>> {
    test.iter().map(|(img, _)| propose(model, img, infer)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Spread { mean, std: var.sqrt() }
    }
}

/// Pooled counts across images plus the per-image mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_per_image: Spread,
    pub recall_per_image: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtpRow {
    pub r_tp: f64,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// Bin centre in units of the background rms.
    pub flux_sigma: f64,
    pub bin: FluxBin,
    pub recall: Option<f64>,
    pub recall_per_image: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub r_nms: f64,
    pub c_nms: f64,
    pub r_tp: f64,
    pub overall: Scores,
    pub per_rtp: Vec<RtpRow>,
    pub per_bin: Vec<BinRow>,
}

impl AccuracyReport {
    /// Pooled recall over bins whose centre satisfies `keep`.
    pub fn recall_where(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let (mut t, mut d) = (0, 0);
        for row in self.per_bin.iter().filter(|r| keep(r.flux_sigma)) {
            t += row.bin.truths;
            d += row.bin.detected;
        }
        (t > 0).then(|| d as f64 / t as f64)
    }

    pub fn precision_at(&self, r_tp: f64) -> Option<f64> {
        self.per_rtp.iter().find(|r| (r.r_tp - r_tp).abs() < 1e-12).map(|r| r.scores.precision)
    }
}

fn scores(per_image: &[(usize, usize, usize)]) -> Scores {
    let tp = per_image.iter().map(|c| c.0).sum();
    let fp = per_image.iter().map(|c| c.1).sum();
    let fn_ = per_image.iter().map(|c| c.2).sum();
    let p = eval::precision(tp, fp, fn_);
    let r = eval::recall(tp, fp, fn_);
    let ps: Vec<f64> = per_image.iter().map(|c| eval::precision(c.0, c.1, c.2)).collect();
    let rs: Vec<f64> = per_image.iter().map(|c| eval::recall(c.0, c.1, c.2)).collect();
    Scores {
        tp,
        fp,
        fn_,
        precision: p,
        recall: r,
        f1: eval::f1(p, r),
        precision_per_image: Spread::of(&ps),
        recall_per_image: Spread::of(&rs),
    }
}

/// Suppresses the stored proposals at `r_nms` and scores them against truth.
/// Flux is binned in units of the simulator's rms `sigma`.
pub fn accuracy_from_proposals(
    proposals: &[Vec<PointRecord>],
    test: &[(Image, Catalog)],
    cfg: &ExperimentConfig,
    r_nms: f64,
    spacing: f64,
) -> AccuracyReport {
    let sigma = cfg.sim.sigma;
    let edges = flux_bin_edges(cfg.sim.n_bins, sigma);
    let detections: Vec<Vec<PointRecord>> = proposals
        .iter()
        .map(|p| nms(p, r_nms, cfg.infer.c_nms, spacing))
        .collect();

    let counts_at = |r_tp: f64| -> Vec<(usize, usize, usize)> {
        detections
            .iter()
            .zip(test)
            .map(|(d, (_, truth))| {
                let m = match_points(d, &truth.records, r_tp, spacing);
                (m.tp, m.fp, m.fn_)
            })
            .collect()
    };

    let mut pooled: Vec<FluxBin> = tally_bins(&[], &[], &edges);
    let mut per_image_bins = Vec::new();
    for (d, (_, truth)) in detections.iter().zip(test) {
        let m = match_points(d, &truth.records, cfg.r_tp, spacing);
        let bins = tally_bins(&truth.records, &m.matched_truths(truth.len()), &edges);
        eval::merge_bins(&mut pooled, &bins);
        per_image_bins.push(bins);
    }
    let per_bin = pooled
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let rs: Vec<f64> = per_image_bins.iter().filter_map(|bins| bins[k].recall()).collect();
            BinRow {
                flux_sigma: b.centre() / sigma,
                bin: *b,
                recall: b.recall(),
                recall_per_image: Spread::of(&rs),
            }
        })
        .collect();

    AccuracyReport {
        r_nms,
        c_nms: cfg.infer.c_nms,
        r_tp: cfg.r_tp,
        overall: scores(&counts_at(cfg.r_tp)),
        per_rtp: cfg
            .rtp_sweep
            .iter()
            .map(|&r| RtpRow {
                r_tp: r,
                scores: scores(&counts_at(r)),
            })
            .collect(),
        per_bin,
    }
}

pub fn accuracy(model: &Model<f32>, test: &[(Image, Catalog)], cfg: &ExperimentConfig, r_nms: f64) -> Result<AccuracyReport> {
    let proposals = test_proposals(model, test, &cfg.infer)?;
    Ok(accuracy_from_proposals(&proposals, test, cfg, r_nms, model.grid().spacing()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnmsRow {
    pub r_nms: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision with the loosest radius of the sweep.
    pub precision_wide: f64,
}

/// Precision, recall and F1 at `cfg.r_tp` for each suppression radius, from
/// one set of proposals.
pub fn rnms_sweep_from_proposals(
    proposals: &[Vec<PointRecord>],
    test: &[(Image, Catalog)],
    cfg: &ExperimentConfig,
    radii: &[f64],
    spacing: f64,
) -> Vec<RnmsRow> {
    radii
        .iter()
        .map(|&r| {
            let report = accuracy_from_proposals(proposals, test, cfg, r, spacing);
            let wide = report.per_rtp.iter().map(|p| p.r_tp).fold(cfg.r_tp, f64::max);
            RnmsRow {
                r_nms: r,
                precision: report.overall.precision,
                recall: report.overall.recall,
                f1: report.overall.f1,
                precision_wide: report.precision_at(wide).unwrap_or(report.overall.precision),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalRow {
    pub gamma: f64,
    pub alpha: f64,
    pub scores: Scores,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains one model per `(gamma, alpha)` pair and scores each on the test set.
pub fn focal_sweep(cfg: &ExperimentConfig, data: &Datasets) -> Result<Vec<FocalRow>> {
    let mut rows = Vec::new();
    for &gamma in &cfg.focal_gammas {
        for &alpha in &cfg.focal_alphas {
            log::info!("focal sweep: gamma {gamma} alpha {alpha}");
            let out = train_model(cfg, &data.train, &data.val, alpha, gamma)?;
            let report = accuracy(&out.model, &data.test, cfg, cfg.infer.r_nms)?;
            rows.push(FocalRow {
                gamma,
                alpha,
                scores: report.overall,
                best_epoch: out.best_epoch,
                best_val_loss: out.best_val_loss(),
            });
        }
    }
    Ok(rows)
}

pub fn focal_table(rows: &[FocalRow]) -> String {
    let mut out = String::from("| gamma | alpha | precision | recall | F1 |\n|---|---|---|---|---|\n");
    for r in rows {
        let s = &r.scores;
        let _ = writeln!(
            out,
            "| {:.1} | {:.1} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} |",
            r.gamma, r.alpha, s.precision, s.precision_per_image.std, s.recall, s.recall_per_image.std, s.f1
        );
    }
    out
}

pub fn accuracy_table(reports: &[&AccuracyReport]) -> String {
    let mut out = String::from("| r_tp |");
    for r in reports {
        let _ = write!(out, " precision (r_nms {}) |", r.r_nms);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(reports.len()));
    out.push('\n');
    if let Some(first) = reports.first() {
        for (k, row) in first.per_rtp.iter().enumerate() {
            let _ = write!(out, "| {:.2} |", row.r_tp);
            for r in reports {
                let s = &r.per_rtp[k].scores;
                let _ = write!(out, " {:.3} ± {:.3} |", s.precision, s.precision_per_image.std);
            }
            out.push('\n');
        }
        out.push_str("\n| J (sigma) |");
        for r in reports {
            let _ = write!(out, " recall (r_nms {}) |", r.r_nms);
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(reports.len()));
        out.push('\n');
        for (k, row) in first.per_bin.iter().enumerate() {
            let _ = write!(out, "| {:.1} |", row.flux_sigma);
            for r in reports {
                let b = &r.per_bin[k];
                match b.recall {
                    Some(v) => {
                        let _ = write!(out, " {:.3} ± {:.3} |", v, b.recall_per_image.std);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn rnms_csv(rows: &[RnmsRow]) -> String {
    let mut out = String::from("r_nms,precision,recall,f1,precision_wide\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.r_nms, r.precision, r.recall, r.f1, r.precision_wide);
    }
    out
}

/// Times both detectors over `cfg.bench_sizes`.
pub fn speed(model: &Model<f32>, cfg: &ExperimentConfig) -> Result<(Vec<TimingRecord>, Vec<SummaryRow>)> {
    let detectors = [
        Detector::Ppn {
            model,
            config: cfg.infer,
        },
        Detector::baseline(),
    ];
    let records = bench::scaling_run(&detectors, &cfg.bench_sizes, cfg.bench_repeats, cfg.seed)?;
    let summary = bench::summarize(&records);
    Ok((records, summary))
}

/// Collects experiment outputs under one directory and records them in
/// `manifest.json`.
pub struct ArtifactWriter {
    dir: PathBuf,
    experiment: String,
    config: serde_json::Value,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config: &'a serde_json::Value,
    artifacts: &'a [String],
}

impl ArtifactWriter {
    pub fn new(dir: impl AsRef<Path>, experiment: &str, config: serde_json::Value) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            experiment: experiment.to_string(),
            config,
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// Writes `value` wrapped with the experiment name and effective config.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let doc = serde_json::json!({
            "experiment": self.experiment,
            "config": self.config,
            "result": value,
        });
        let text = serde_json::to_string_pretty(&doc).expect("report serialises") + "\n";
        self.text(name, &text)
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            experiment: &self.experiment,
            config: &self.config,
            artifacts: &self.artifacts,
        };
        let p = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            sim: SimConfig {
                image_size: 256,
                n_sources: 8,
                ..SimConfig::default()
            },
            width_factor: 0.125,
            train_patches: 4,
            val_patches: 2,
            test_images: 2,
            train: TrainConfig {
                batch_size: 2,
                epochs: 1,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn perfect_proposals_score_perfectly() {
        let cfg = tiny();
        let test = test_images(&cfg).unwrap();
        let proposals: Vec<Vec<PointRecord>> = test
            .iter()
            .map(|(_, t)| t.iter().map(|p| PointRecord::new(p.x, p.y, 0.99)).collect())
            .collect();
        let report = accuracy_from_proposals(&proposals, &test, &cfg, 0.0, 32.0);
        assert_eq!(report.overall.precision, 1.0);
        assert_eq!(report.overall.recall, 1.0);
        assert_eq!(report.recall_where(|_| true), Some(1.0));
        assert_eq!(report.precision_at(0.05), Some(1.0));
        assert!(accuracy_table(&[&report]).contains("| 0.40 |"));
    }

    #[test]
    fn datasets_use_disjoint_seeds() {
        let cfg = tiny();
        let d = build_datasets(&cfg).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (4, 2, 2));
        assert_ne!(d.train[0].patch, d.val[0].patch);
    }

    #[test]
    fn end_to_end_smoke() {
        let cfg = tiny();
        let data = build_datasets(&cfg).unwrap();
        let out = train_model(&cfg, &data.train, &data.val, 0.5, 0.0).unwrap();
        assert_eq!(out.history.len(), 1);
        let proposals = test_proposals(&out.model, &data.test, &cfg.infer).unwrap();
        let rows = rnms_sweep_from_proposals(&proposals, &data.test, &cfg, &[0.1, 0.35, 0.8], 32.0);
        assert_eq!(rows.len(), 3);
        assert!(rnms_csv(&rows).starts_with("r_nms,"));
    }

    #[test]
    fn manifest_lists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path(), "demo", serde_json::json!({"seed": 1})).unwrap();
        w.text("a.csv", "x\n").unwrap();
        w.json("b.json", &vec![1, 2]).unwrap();
        let p = w.finish().unwrap();
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(m["artifacts"], serde_json::json!(["a.csv", "b.json"]));
        let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
        assert_eq!(b["config"]["seed"], 1);
    }
}

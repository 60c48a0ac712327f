//! Per-step wall-clock timing of both detectors over a ladder of image sizes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floodfill::{threshold_blob_detect, Connectivity};
use crate::image::Image;
use crate::infer::{detect_timed, InferConfig};
use crate::net::model::Model;
use crate::skysim::{density_scaled_sources, patch_starts, simulate, SimConfig};

pub const CSV_HEADER: &str = "detector,size,step,repeat,seconds";

/// Step name of the diagnostic row emitted when a size cannot be allocated.
pub const SKIPPED: &str = "skipped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Ppn,
    Baseline,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Ppn => "ppn",
            DetectorKind::Baseline => "baseline",
        }
    }

    pub fn steps(self) -> &'static [&'static str] {
        match self {
            DetectorKind::Ppn => &["patching", "cnn", "nms", "total"],
            DetectorKind::Baseline => &["tbd", "total"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppn" => Ok(DetectorKind::Ppn),
            "baseline" => Ok(DetectorKind::Baseline),
            other => Err(Error::arg("detector", format!("unknown detector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub detector: DetectorKind,
    pub size: usize,
    pub step: String,
    pub repeat: usize,
    pub seconds: f64,
}

/// A ready-to-run detector. Model construction is not timed.
pub enum Detector<'a> {
    Ppn { model: &'a Model<f32>, config: InferConfig },
    Baseline { tau: f64, min_area: usize, connectivity: Connectivity },
}

impl Detector<'_> {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Ppn { .. } => DetectorKind::Ppn,
            Detector::Baseline { .. } => DetectorKind::Baseline,
        }
    }

    pub fn baseline() -> Self {
        Detector::Baseline {
            tau: 0.5,
            min_area: 3,
            connectivity: Connectivity::Four,
        }
    }

    /// Rough peak working memory in bytes for an image of `size^2` pixels.
    fn working_bytes(&self, size: usize) -> usize {
        let pixels = size.saturating_mul(size);
        match self {
            Detector::Ppn { model, config } => {
                let p = model.grid().patch_size;
                let per_axis = size.div_ceil(p.saturating_sub(config.overlap).max(1)) + 1;
                let patches = per_axis.saturating_mul(per_axis).saturating_mul(p * p * 8);
                pixels.saturating_mul(4).saturating_add(patches)
            }
            Detector::Baseline { .. } => pixels.saturating_mul(12),
        }
    }
}

/// Times one detection of `image`, which is already in memory.
pub fn time_detection(detector: &Detector, image: &Image, repeat: usize) -> Result<Vec<TimingRecord>> {
    let size = image.width();
    let kind = detector.kind();
    let row = |step: &str, seconds: f64| TimingRecord {
        detector: kind,
        size,
        step: step.to_string(),
        repeat,
        seconds,
    };
    match detector {
        Detector::Ppn { model, config } => {
            let (_, t) = detect_timed(*model, image, config, true)?;
            Ok(vec![
                row("patching", t.patching.as_secs_f64()),
                row("cnn", t.cnn.as_secs_f64()),
                row("nms", t.nms.as_secs_f64()),
                row("total", t.total.as_secs_f64()),
            ])
        }
        Detector::Baseline {
            tau,
            min_area,
            connectivity,
        } => {
            let start = Instant::now();
            let cat = threshold_blob_detect(image, *tau, *min_area, *connectivity)?;
            let tbd = start.elapsed();
            std::hint::black_box(&cat);
            let total = start.elapsed();
            Ok(vec![row("tbd", tbd.as_secs_f64()), row("total", total.as_secs_f64())])
        }
    }
}

/// Simulated benchmark image of side `size` with area-scaled source count.
pub fn ladder_image(size: usize, seed: u64) -> Result<Image> {
    let cfg = SimConfig {
        image_size: size,
        n_sources: density_scaled_sources(size),
        seed: seed.wrapping_add(size as u64),
        ..SimConfig::default()
    };
    Ok(simulate(&cfg)?.0)
}

fn can_allocate(bytes: usize) -> bool {
    let mut probe: Vec<u8> = Vec::new();
    probe.try_reserve_exact(bytes).is_ok()
}

/// For each size: simulate one image, run one untimed warm-up per detector,
/// then `repeats` timed detections. Sizes whose working set cannot be
/// reserved yield a single `skipped` row with NaN seconds.
pub fn scaling_run(detectors: &[Detector], sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<TimingRecord>> {
    if repeats == 0 {
        return Err(Error::arg("repeats", "must be at least 1"));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::arg("sizes", "sizes must be positive and non-empty"));
    }
    let mut out = Vec::new();
    for &size in sizes {
        let budget = detectors
            .iter()
            .map(|d| d.working_bytes(size))
            .max()
            .unwrap_or(0)
            .saturating_add(size.saturating_mul(size).saturating_mul(8));
        if !can_allocate(budget) {
            log::warn!("size {size}: cannot reserve {budget} bytes, skipping");
            for d in detectors {
                out.push(TimingRecord {
                    detector: d.kind(),
                    size,
                    step: SKIPPED.to_string(),
                    repeat: 0,
                    seconds: f64::NAN,
                });
            }
            continue;
        }
        let image = ladder_image(size, seed)?;
        for d in detectors {
            time_detection(d, &image, 0)?;
            for r in 0..repeats {
                out.extend(time_detection(d, &image, r)?);
            }
            log::info!("size {size}: {} timed {repeats}x", d.kind().name());
        }
    }
    Ok(out)
}

pub fn to_csv(records: &[TimingRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{:.9}", r.detector.name(), r.size, r.step, r.repeat, r.seconds);
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, records: &[TimingRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<TimingRecord>> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::format(path.display().to_string(), format!("expected header `{CSV_HEADER}`")));
    }
    reader.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

/// PPN patches for a square image of side `size`.
pub fn ppn_patch_count(size: usize, patch: usize, overlap: usize) -> Result<usize> {
    let n = patch_starts(size, patch, overlap)?.len();
    Ok(n * n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub detector: DetectorKind,
    pub size: usize,
    pub step: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
}

/// Mean and standard deviation per `(detector, size, step)`, skipping
/// diagnostic rows.
pub fn summarize(records: &[TimingRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(DetectorKind, usize, String), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.step != SKIPPED && r.seconds.is_finite()) {
        groups.entry((r.detector, r.size, r.step.clone())).or_default().push(r.seconds);
    }
    groups
        .into_iter()
        .map(|((detector, size, step), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                detector,
                size,
                step,
                n,
                mean,
                std,
            }
        })
        .collect()
}

pub fn mean_of(summary: &[SummaryRow], detector: DetectorKind, size: usize, step: &str) -> Option<f64> {
    summary
        .iter()
        .find(|r| r.detector == detector && r.size == size && r.step == step)
        .map(|r| r.mean)
}

/// Markdown table with one row per size and `mean ± std` per detector step.
pub fn report_table(summary: &[SummaryRow]) -> String {
    let sizes: Vec<usize> = summary.iter().map(|r| r.size).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let columns: Vec<(DetectorKind, &str)> = [DetectorKind::Ppn, DetectorKind::Baseline]
        .into_iter()
        .flat_map(|d| d.steps().iter().map(move |s| (d, *s)))
        .filter(|(d, s)| summary.iter().any(|r| r.detector == *d && r.step == *s))
        .collect();
    let mut out = String::from("| size |");
    for (d, s) in &columns {
        let _ = write!(out, " {} {} |", d.name(), s);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    for size in sizes {
        let _ = write!(out, "| {size} |");
        for (d, s) in &columns {
            match summary.iter().find(|r| r.detector == *d && r.size == size && r.step == *s) {
                Some(r) => {
                    let _ = write!(out, " {:.4} ± {:.4} |", r.mean, r.std);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-size curves: mean total time, its square root, and the PPN step
/// fractions.
pub fn report_curves(summary: &[SummaryRow]) -> String {
    let mut out = String::from("detector,size,mean_total,sqrt_mean_total,std_total\n");
    for r in summary.iter().filter(|r| r.step == "total") {
        let _ = writeln!(out, "{},{},{:.9},{:.9},{:.9}", r.detector.name(), r.size, r.mean, r.mean.sqrt(), r.std);
    }
    out
}

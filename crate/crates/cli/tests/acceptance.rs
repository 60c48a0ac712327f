//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Trained models are cached under the cargo temp directory, keyed by a
//! fingerprint of the full training configuration. Set
//! `PPN_ACCEPTANCE_RETRAIN=1` to ignore the cache.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppn::bench::{self, Detector, DetectorKind};
use ppn::eval::{match_points, precision_vs_rtp, MATCH_SLACK};
use ppn::experiment::{self, AccuracyReport, ExperimentConfig};
use ppn::floodfill::{threshold_blob_detect, Connectivity};
use ppn::geometry::GridSpec;
use ppn::infer::{decode, nms};
use ppn::net::{self, Model, NetConfig, NetOutput, Tensor};
use ppn::train::loss::{batch_loss, confidence_loss, regression_loss};
use ppn::train::targets::{encode_targets, TargetMaps};
use ppn::train::{Sample, TrainConfig};
use ppn::{Image, PointRecord};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------ shared setup

/// Desk-scale training and evaluation configuration.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

struct Lab {
    cfg: ExperimentConfig,
    cache: PathBuf,
    data: Option<experiment::Datasets>,
    models: Vec<((u64, u64), Model<f32>, Vec<Vec<PointRecord>>)>,
}

impl Lab {
    fn new() -> Self {
        let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models");
        fs::create_dir_all(&cache).expect("cache dir");
        Self {
            cfg: desk_config(),
            cache,
            data: None,
            models: Vec::new(),
        }
    }

    fn data(&mut self) -> &experiment::Datasets {
        if self.data.is_none() {
            let t = Instant::now();
            self.data = Some(experiment::build_datasets(&self.cfg).expect("datasets"));
            println!("  .. built datasets in {:.1}s", t.elapsed().as_secs_f64());
        }
        self.data.as_ref().unwrap()
    }

    fn model_path(&self, alpha: f64, gamma: f64) -> PathBuf {
        let key = serde_json::to_string(&(&self.cfg, alpha, gamma)).unwrap();
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        self.cache
            .join(format!("a{alpha}-g{gamma}-{:016x}.ppnmodel", h.finish()))
    }

    /// Index of the trained model for `(alpha, gamma)`, training or loading it
    /// and computing its raw test-set proposals on first use.
    fn ensure(&mut self, alpha: f64, gamma: f64) -> usize {
        let key = (alpha.to_bits(), gamma.to_bits());
        if let Some(k) = self.models.iter().position(|m| m.0 == key) {
            return k;
        }
        let path = self.model_path(alpha, gamma);
        let retrain = std::env::var("PPN_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
        let cfg = self.cfg.clone();
        let model = if path.exists() && !retrain {
            println!("  .. loaded cached model {}", path.display());
            net::load(&path).expect("cached model")
        } else {
            let t = Instant::now();
            let data = self.data();
            let out = experiment::train_model(&cfg, &data.train, &data.val, alpha, gamma).expect("training");
            println!(
                "  .. trained alpha {alpha} gamma {gamma} in {:.0}s: best epoch {} val loss {:.4}",
                t.elapsed().as_secs_f64(),
                out.best_epoch,
                out.best_val_loss()
            );
            net::save(&out.model, &path).expect("save model");
            out.model
        };
        let proposals = experiment::test_proposals(&model, &self.data().test, &cfg.infer).expect("proposals");
        self.models.push((key, model, proposals));
        self.models.len() - 1
    }

    fn model(&mut self, alpha: f64, gamma: f64) -> &Model<f32> {
        let k = self.ensure(alpha, gamma);
        &self.models[k].1
    }

    fn report(&mut self, alpha: f64, gamma: f64, r_nms: f64) -> AccuracyReport {
        let k = self.ensure(alpha, gamma);
        let (_, model, proposals) = &self.models[k];
        let test = &self.data.as_ref().unwrap().test;
        experiment::accuracy_from_proposals(proposals, test, &self.cfg, r_nms, model.grid().spacing())
    }
}

const EPS: f64 = 1e-9;

// ------------------------------------------------------------ 1-5: trained

fn recall_trend(lab: &mut Lab) -> Verdict {
    let r = lab.report(0.5, 0.0, 0.35);
    let hi = r.recall_where(|j| j >= 5.0 - EPS).unwrap_or(0.0);
    let lo = r.recall_where(|j| j <= 1.0 + EPS).unwrap_or(1.0);
    verdict(
        hi >= 0.75 && lo <= 0.25,
        format!("recall J>=5 sigma {hi:.3} (>= 0.75), J<=1 sigma {lo:.3} (<= 0.25)"),
    )
}

fn precision_trend(lab: &mut Lab) -> Verdict {
    let r = lab.report(0.5, 0.0, 0.35);
    let p = r.overall.precision;
    verdict(
        p >= 0.85,
        format!(
            "precision {p:.3} (>= 0.85) at r_tp 0.4, c_nms 0.8, r_nms 0.35; per image {:.3} +- {:.3}",
            r.overall.precision_per_image.mean, r.overall.precision_per_image.std
        ),
    )
}

fn rnms_tradeoff(lab: &mut Lab) -> Verdict {
    let reports: Vec<AccuracyReport> = [0.1, 0.35, 0.8].iter().map(|&r| lab.report(0.5, 0.0, r)).collect();
    let recall: Vec<f64> = reports.iter().map(|r| r.overall.recall).collect();
    let wide: Vec<f64> = reports.iter().map(|r| r.precision_at(1.0).unwrap()).collect();
    let ok = recall.windows(2).all(|w| w[1] <= w[0]) && wide.windows(2).all(|w| w[1] >= w[0]);
    verdict(
        ok,
        format!("r_nms 0.1/0.35/0.8: recall {recall:.3?} non-increasing, precision at r_tp 1.0 {wide:.3?} non-decreasing"),
    )
}

fn scaling(lab: &mut Lab) -> Verdict {
    let cfg = lab.cfg.clone();
    let model = lab.model(0.5, 0.0);
    let detectors = [
        Detector::Ppn {
            model,
            config: cfg.infer,
        },
        Detector::baseline(),
    ];
    let records = bench::scaling_run(&detectors, &[1024, 2048, 4096], 3, cfg.seed).expect("timing run");
    let summary = bench::summarize(&records);
    let t = |d, s| bench::mean_of(&summary, d, s, "total").unwrap();
    let ppn_ratio = t(DetectorKind::Ppn, 4096) / t(DetectorKind::Ppn, 2048);
    let base_ratio = t(DetectorKind::Baseline, 4096) / t(DetectorKind::Baseline, 1024);
    let faster = t(DetectorKind::Ppn, 4096) < t(DetectorKind::Baseline, 4096);
    // Baseline time over a 16x pixel increase, against linear growth (16x).
    verdict(
        (3.0..=6.0).contains(&ppn_ratio) && base_ratio >= 16.0,
        format!(
            "PPN 4096/2048 total ratio {ppn_ratio:.2} (in [3, 6]); baseline 4096/1024 ratio {base_ratio:.1} (>= 16, linear); \
             PPN {:.3}s vs baseline {:.3}s at 4096 (reported only: PPN faster = {faster})",
            t(DetectorKind::Ppn, 4096),
            t(DetectorKind::Baseline, 4096)
        ),
    )
}

fn focal_direction(lab: &mut Lab) -> Verdict {
    let plain = lab.report(0.5, 0.0, 0.35).overall.recall;
    let focal = lab.report(0.5, 2.0, 0.35).overall.recall;
    verdict(
        focal <= plain + 0.05,
        format!("recall gamma 2 / alpha 0.5 {focal:.3} vs gamma 0 / alpha 0.5 {plain:.3} (slack 0.05)"),
    )
}

// ------------------------------------------------------------ 6: NMS oracle

/// Direct transcription of the suppression loop: repeatedly take the most
/// confident survivor (earliest on ties) and discard everything within the
/// radius of it.
fn nms_reference(points: &[PointRecord], r: f64, c_min: f64, spacing: f64) -> Vec<PointRecord> {
    let mut left: Vec<PointRecord> = points.iter().copied().filter(|p| p.score >= c_min).collect();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if left[k].score > left[best].score {
                best = k;
            }
        }
        let p = left[best];
        kept.push(p);
        left.retain(|q| ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt() >= r * spacing);
    }
    kept
}

fn nms_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spacing = 32.0;
    let (mut mismatches, mut broken) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(0..=50);
        let points: Vec<PointRecord> = (0..n)
            .map(|_| {
                let score = (rng.random_range(0..=20) as f64) / 20.0;
                PointRecord::new(rng.random_range(0.0..160.0), rng.random_range(0.0..160.0), score.clamp(0.01, 0.99))
            })
            .collect();
        let r = rng.random_range(0.05..1.5);
        let c = rng.random_range(0.0..0.9);
        let got = nms(&points, r, c, spacing);
        if got != nms_reference(&points, r, c, spacing) {
            mismatches += 1;
        }
        let again = nms(&got, r, c, spacing);
        let separated = got
            .iter()
            .enumerate()
            .all(|(i, p)| got[i + 1..].iter().all(|q| p.distance(q) >= r * spacing));
        if again != got || !separated {
            broken += 1;
        }
    }
    verdict(
        mismatches == 0 && broken == 0,
        format!("1000 random sets: {mismatches} oracle mismatches, {broken} idempotence/separation violations"),
    )
}

// ------------------------------------------------------------ 7: loss

fn random_targets(rng: &mut ChaCha8Rng, grid: &GridSpec) -> TargetMaps {
    let n = rng.random_range(0..6);
    let size = grid.patch_size as f64;
    let truth: Vec<PointRecord> = (0..n)
        .map(|_| PointRecord::new(rng.random_range(0.0..size), rng.random_range(0.0..size), 1.0))
        .collect();
    let r_far = rng.random_range(0.7..2.0);
    encode_targets(&truth, grid, std::f64::consts::FRAC_1_SQRT_2, r_far).unwrap()
}

fn loss_identities() -> Verdict {
    let grid = GridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_bce = 0.0f64;
    let mut negative = 0;
    let mut leaks = 0;
    for _ in 0..100 {
        let t = random_targets(&mut rng, &grid);
        let c: Vec<f64> = (0..t.len()).map(|_| rng.random_range(0.001..0.999)).collect();
        let bce: f64 = (0..t.len())
            .filter(|&k| t.b[k] == 1)
            .map(|k| if t.c_hat[k] == 1 { -c[k].ln() } else { -(1.0 - c[k]).ln() })
            .sum();
        let e = confidence_loss(&c, &t, 1.0, 0.0).unwrap();
        worst_bce = worst_bce.max((e - bce).abs() / bce.abs().max(1.0));

        let alpha = rng.random_range(0.1..3.0);
        let gamma = rng.random_range(0.0..3.0);
        let r: Vec<f64> = (0..2 * t.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ec = confidence_loss(&c, &t, alpha, gamma).unwrap();
        let er = regression_loss(&r, &t).unwrap();
        if ec < 0.0 || er < 0.0 {
            negative += 1;
        }
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        for k in 0..t.len() {
            if t.b[k] == 0 {
                c2[k] = rng.random_range(0.001..0.999);
            }
            if t.b_star[k] == 0 {
                r2[2 * k] = rng.random_range(-5.0..5.0);
                r2[2 * k + 1] = rng.random_range(-5.0..5.0);
            }
        }
        if confidence_loss(&c2, &t, alpha, gamma).unwrap() != ec || regression_loss(&r2, &t).unwrap() != er {
            leaks += 1;
        }
    }
    let one = TargetMaps {
        grid_m: 1,
        grid_n: 1,
        c_hat: vec![1],
        r_hat: vec![0.3, -0.2],
        b: vec![1],
        b_star: vec![1],
        nearest: vec![0.0],
    };
    let h1 = confidence_loss(&[0.5], &one, 0.5, 0.0).unwrap();
    let h2 = confidence_loss(&[0.9], &one, 1.0, 2.0).unwrap();
    let h3 = regression_loss(&[0.0, 0.0], &one).unwrap();
    let hand = (h1 - 0.346574).abs() < 1e-6 && (h2 - 0.00105361).abs() < 1e-6 && (h3 - 0.13).abs() < 1e-6;
    verdict(
        worst_bce < 1e-6 && hand && negative == 0 && leaks == 0,
        format!(
            "BCE reduction worst error {worst_bce:.1e} over 100 instances; hand values {h1:.6} {h2:.8} {h3:.6}; \
             {negative} negative losses; {leaks} masked-term leaks"
        ),
    )
}

// ------------------------------------------------------------ 8: gradients

fn toy_net() -> NetConfig {
    NetConfig {
        base_depth: 3,
        input_size: 8,
        grid: GridSpec::new(8, 2, 2).unwrap(),
        feature_channels: vec![3, 4],
        stage_blocks: vec![1],
        head_channels: 4,
        pi: 0.1,
        dropout_rate: 0.2,
    }
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<Sample> = (0..3)
        .map(|_| {
            let (sx, sy) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
            let patch = Image::from_fn(8, 8, |x, y| {
                let d2: f64 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                (-d2 / 2.0).exp() as f32
            })
            .unwrap();
            Sample {
                patch,
                truth: vec![PointRecord::new(sx, sy, 1.0)],
            }
        })
        .collect();
    let tc = TrainConfig {
        alpha: 0.25,
        gamma: 2.0,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let grid = toy_net().grid;
    let targets: Vec<TargetMaps> = samples
        .iter()
        .map(|s| encode_targets(&s.truth, &grid, tc.r_near, tc.r_far()).unwrap())
        .collect();
    let t: Vec<&TargetMaps> = targets.iter().collect();
    let w = tc.weights();
    let base = Model::<f64>::build(&toy_net(), 8).unwrap();
    let patches: Vec<&Image> = samples.iter().map(|s| &s.patch).collect();
    let x: Tensor<f64> = base.batch_input(&patches).unwrap();
    let loss_at = |m: &Model<f64>| {
        let mut m = m.clone();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(80);
        let (raw, _) = m.forward_train(&x, &mut drop_rng).unwrap();
        batch_loss(&raw, &t, &w).unwrap().total
    };
    let mut model = base.clone();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(80);
    let (raw, tape) = model.forward_train(&x, &mut drop_rng).unwrap();
    let l = batch_loss(&raw, &t, &w).unwrap();
    model.zero_grad();
    model.backward(tape, &l.d_logits, &l.d_offsets);

    let mut analytic = Vec::new();
    model.visit_params(&mut |name, p| {
        for k in 0..p.value.len() {
            analytic.push((name.to_string(), k, p.grad[k]));
        }
    });
    let h = 1e-3;
    let (mut diff2, mut norm2, mut head_worst) = (0.0f64, 0.0f64, 0.0f64);
    for (name, k, g) in &analytic {
        let shift = |delta: f64| {
            let mut m = base.clone();
            m.visit_params(&mut |n, p| {
                if n == name {
                    p.value[*k] += delta;
                }
            });
            loss_at(&m)
        };
        let num = (shift(h) - shift(-h)) / (2.0 * h);
        diff2 += (num - g).powi(2);
        norm2 += num.powi(2).max(g.powi(2));
        if name.starts_with("head.") {
            head_worst = head_worst.max((num - g).abs() / num.abs().max(g.abs()).max(1e-4));
        }
    }
    let rel = (diff2 / norm2).sqrt();
    verdict(
        rel < 1e-2 && head_worst < 1e-2,
        format!(
            "{} parameters, step {h}: gradient relative error {rel:.2e} (< 1e-2); worst head element {head_worst:.2e} (< 1e-2)",
            analytic.len()
        ),
    )
}

// ------------------------------------------------------------ 9: targets

fn target_encoding() -> Verdict {
    let grid = GridSpec::default();
    let s = grid.spacing();
    let r_near = std::f64::consts::FRAC_1_SQRT_2;
    // Corner shared by origins (2,2), (2,3), (3,2), (3,3).
    let corner = PointRecord::new(3.0 * s, 3.0 * s, 1.0);
    let t = encode_targets(&[corner], &grid, r_near, r_near).unwrap();
    let four = [(2, 2), (2, 3), (3, 2), (3, 3)];
    let boundary = t.positives() == 4 && four.iter().all(|&(i, j)| t.c_hat[i * grid.grid_n + j] == 1);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut violations, mut monotone_breaks) = (0, 0);
    for _ in 0..500 {
        let n = rng.random_range(0..12);
        let truth: Vec<PointRecord> = (0..n)
            .map(|_| PointRecord::new(rng.random_range(0.0..224.0), rng.random_range(0.0..224.0), 1.0))
            .collect();
        let r_far = rng.random_range(r_near..2.5);
        let t = encode_targets(&truth, &grid, r_near, r_far).unwrap();
        for i in 0..grid.grid_m {
            for j in 0..grid.grid_n {
                let k = i * grid.grid_n + j;
                let (ox, oy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let nearest = truth
                    .iter()
                    .map(|p| ((p.x - ox).powi(2) + (p.y - oy).powi(2)).sqrt() / s)
                    .fold(f64::INFINITY, f64::min);
                let positive = nearest <= r_near + 1e-9;
                let mut ok = (t.c_hat[k] == 1) == positive
                    && t.b_star[k] == t.c_hat[k]
                    && (t.b[k] == 1) == (positive || nearest > r_far)
                    && t.b_star[k] <= t.b[k];
                if positive {
                    let (dx, dy) = (t.r_hat[2 * k], t.r_hat[2 * k + 1]);
                    let hit = truth
                        .iter()
                        .any(|p| (ox + dx * s - p.x).abs() < 1e-9 && (oy + dy * s - p.y).abs() < 1e-9);
                    ok &= hit && ((dx * dx + dy * dy).sqrt() - nearest).abs() < 1e-9;
                } else {
                    ok &= t.r_hat[2 * k] == 0.0 && t.r_hat[2 * k + 1] == 0.0;
                }
                if !ok {
                    violations += 1;
                }
            }
        }
        let wider = encode_targets(&truth, &grid, r_near, r_far + 0.5).unwrap();
        if (0..t.len()).any(|k| wider.b[k] > t.b[k]) {
            monotone_breaks += 1;
        }
    }
    verdict(
        boundary && violations == 0 && monotone_breaks == 0,
        format!(
            "equidistant corner gives {} positives (all 4 expected); 500 catalogs: {violations} invariant violations, \
             {monotone_breaks} r_far monotonicity breaks",
            t.positives()
        ),
    )
}

// ------------------------------------------------------------ 10: matching

fn match_reference(preds: &[PointRecord], truths: &[PointRecord], r_tp: f64, spacing: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let d = ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt();
            if d <= r_tp * spacing + MATCH_SLACK {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_t) = (vec![false; preds.len()], vec![false; truths.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

fn matching_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spacing = 32.0;
    let radii = [0.05, 0.1, 0.15, 0.2, 0.25, 0.4, 0.5, 1.0];
    let (mut mismatches, mut exclusivity, mut monotone) = (0, 0, 0);
    for _ in 0..1000 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<PointRecord> {
            let n = rng.random_range(0..=8);
            (0..n)
                .map(|_| PointRecord::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), 1.0))
                .collect()
        };
        let preds = pts(&mut rng);
        let truths = pts(&mut rng);
        let r_tp = rng.random_range(0.05..1.5);
        let m = match_points(&preds, &truths, r_tp, spacing);
        let mut got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.prediction, p.truth)).collect();
        got.sort();
        if got != match_reference(&preds, &truths, r_tp, spacing)
            || m.tp + m.fp != preds.len()
            || m.tp + m.fn_ != truths.len()
        {
            mismatches += 1;
        }
        let mut ps: Vec<usize> = got.iter().map(|p| p.0).collect();
        let mut ts: Vec<usize> = got.iter().map(|p| p.1).collect();
        ps.dedup();
        ts.sort();
        ts.dedup();
        if ps.len() != got.len() || ts.len() != got.len() {
            exclusivity += 1;
        }
        let curve = precision_vs_rtp(&preds, &truths, &radii, spacing);
        if curve.windows(2).any(|w| w[1].precision < w[0].precision) {
            monotone += 1;
        }
    }
    verdict(
        mismatches + exclusivity + monotone == 0,
        format!(
            "1000 instances: {mismatches} oracle mismatches, {exclusivity} exclusivity violations, \
             {monotone} precision-vs-r_tp decreases"
        ),
    )
}

// ------------------------------------------------------------ 11: decode

fn decode_geometry() -> Verdict {
    let grid = GridSpec::default();
    let s = grid.spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut broken = 0;
    for _ in 0..200 {
        let mut out = NetOutput::zeros(grid.grid_m, grid.grid_n);
        for v in out.confidence.iter_mut() {
            *v = rng.random_range(0.01..0.99);
        }
        // Multiples of 1/64 keep every sum exact in binary.
        for v in out.regression.iter_mut() {
            *v = rng.random_range(-64..=64) as f32 / 64.0;
        }
        let o = (rng.random_range(0..4000) as f64, rng.random_range(0..4000) as f64);
        let shift = (rng.random_range(-2000..2000) as f64, rng.random_range(-2000..2000) as f64);
        let a: Vec<PointRecord> = decode(&out, &grid, o)
            .iter()
            .map(|p| p.translated(shift.0, shift.1))
            .collect();
        let b = decode(&out, &grid, (o.0 + shift.0, o.1 + shift.1));
        if a != b {
            broken += 1;
        }
    }
    let mut unit = NetOutput::zeros(grid.grid_m, grid.grid_n);
    let (i, j) = (3, 2);
    let k = i * grid.grid_n + j;
    unit.regression[2 * k] = 1.0;
    unit.regression[2 * k + 1] = 0.0;
    let p = decode(&unit, &grid, (0.0, 0.0))[k];
    let right = grid.origin_position(i, j + 1).unwrap();
    unit.regression[2 * k] = 0.0;
    unit.regression[2 * k + 1] = 1.0;
    let q = decode(&unit, &grid, (0.0, 0.0))[k];
    let below = grid.origin_position(i + 1, j).unwrap();
    let lands = (p.x, p.y) == right && (q.x, q.y) == below && s == 32.0;
    verdict(
        broken == 0 && lands,
        format!("200 random outputs: {broken} translation mismatches; unit offsets land on neighbouring origins: {lands}"),
    )
}

// ------------------------------------------------------------ 12: flood fill

fn flood_fill() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sd = 3.0 / (8.0f64 * 2.0f64.ln()).sqrt();
    let mut worst = 0.0f64;
    let mut order_breaks = 0;
    for _ in 0..100 {
        let (cx, cy) = (20.0 + rng.random_range(0.0..1.0), 24.0 + rng.random_range(0.0..1.0));
        let img = Image::from_fn(48, 48, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-d2 / (2.0 * sd * sd)).exp() as f32
        })
        .unwrap();
        let found = threshold_blob_detect(&img, 0.5, 1, Connectivity::Four).unwrap();
        let err = match found.records.as_slice() {
            [p] => ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt(),
            _ => f64::INFINITY,
        };
        worst = worst.max(err);

        // A rotated image is scanned in a different order; detections must
        // map onto each other.
        let blobs = Image::from_fn(40, 40, |_, _| rng.random_range(0.0..1.0f32)).unwrap();
        let a = threshold_blob_detect(&blobs, 0.6, 2, Connectivity::Four).unwrap();
        let b = threshold_blob_detect(&blobs.rotate90(), 0.6, 2, Connectivity::Four).unwrap();
        let w = blobs.width() as f64;
        let mut mapped: Vec<(i64, i64)> = a
            .iter()
            .map(|p| ((p.y * 1e6).round() as i64, ((w - 1.0 - p.x) * 1e6).round() as i64))
            .collect();
        let mut direct: Vec<(i64, i64)> = b.iter().map(|p| ((p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64)).collect();
        mapped.sort();
        direct.sort();
        if mapped != direct {
            order_breaks += 1;
        }
    }
    let t = Instant::now();
    let full = Image::from_fn(4096, 4096, |_, _| 1.0).unwrap();
    let big = threshold_blob_detect(&full, 0.5, 1, Connectivity::Four).unwrap();
    let big_ok = big.len() == 1 && (big.records[0].x - 2047.5).abs() < 1e-6 && (big.records[0].y - 2047.5).abs() < 1e-6;
    verdict(
        worst <= 0.5 && order_breaks == 0 && big_ok,
        format!(
            "worst centroid error {worst:.4} px (<= 0.5) over 100 placements; {order_breaks} scan-order mismatches; \
             4096^2 saturated image -> {} island(s) in {:.2}s",
            big.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------ 13: round trips

fn ppn_bin(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ppn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn round_trips(dir: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, -f32::MAX, 1.0 / 3.0];
    let values: Vec<f32> = (0..37 * 23)
        .map(|k| if k < specials.len() { specials[k] } else { rng.random::<f32>() })
        .collect();
    let img = Image::new(37, 23, values).unwrap();
    let back = Image::from_bytes(&img.to_bytes()).unwrap();
    let image_ok = back.to_bytes() == img.to_bytes()
        && back.values().iter().zip(img.values()).all(|(a, b)| a.to_bits() == b.to_bits());

    let cfg = NetConfig::resnet(9).unwrap().scaled_widths(0.125);
    let model = Model::<f32>::build(&cfg, 13).unwrap();
    let bytes = net::io::to_bytes(&model);
    let loaded = net::io::from_bytes(&bytes).unwrap();
    let patch = Image::from_fn(224, 224, |x, y| ((x * 7 + y * 13) % 17) as f32 / 17.0).unwrap();
    let same_out = model.forward(&patch).unwrap() == loaded.forward(&patch).unwrap();
    let model_ok = net::io::to_bytes(&loaded) == bytes && same_out;

    let s = |p: &Path| p.to_str().unwrap().to_string();
    let model_path = dir.join("m.ppnmodel");
    net::save(&model, &model_path).unwrap();
    let mut pipeline_ok = true;
    let mut runs: Vec<Vec<Vec<u8>>> = Vec::new();
    for k in 0..2 {
        let d = dir.join(format!("run{k}"));
        let (img, truth) = (d.join("img_00000.ppn"), d.join("img_00000.truth.csv"));
        let (det, base, rep) = (d.join("det.csv"), d.join("base.csv"), d.join("report.json"));
        pipeline_ok &= ppn_bin(&["simulate", "--out", &s(&d), "--count", "1", "--size", "512", "--seed", "13"]);
        pipeline_ok &= ppn_bin(&["detect", "--model", &s(&model_path), "--image", &s(&img), "--c-nms", "0.05", "--out", &s(&det)]);
        pipeline_ok &= ppn_bin(&["detect-baseline", "--image", &s(&img), "--out", &s(&base)]);
        pipeline_ok &= ppn_bin(&["evaluate", "--pred", &s(&base), "--truth", &s(&truth), "--out", &s(&rep)]);
        if !pipeline_ok {
            break;
        }
        let names = ["img_00000.ppn", "img_00000.truth.csv", "img_00000.meta.json", "det.csv", "base.csv", "report.json"];
        runs.push(names.iter().map(|n| fs::read(d.join(n)).unwrap()).collect());
    }
    let reproducible = pipeline_ok && runs[0] == runs[1];
    verdict(
        image_ok && model_ok && reproducible,
        format!("image bit-exact {image_ok}; model bit-exact {model_ok}; simulate/detect/evaluate byte-identical {reproducible}"),
    )
}

fn main() {
    let started = Instant::now();
    let scratch = tempfile::tempdir().expect("scratch dir");
    let mut lab = Lab::new();
    // Numeric arguments select a subset of criteria; other arguments come
    // from the test runner and are ignored.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);
    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let criteria: [(u32, &str, fn(&mut Lab, &Path) -> Verdict); 13] = [
        (1, "recall trend", |lab, _| recall_trend(lab)),
        (2, "precision trend", |lab, _| precision_trend(lab)),
        (3, "r_nms trade-off", |lab, _| rnms_tradeoff(lab)),
        (4, "scaling", |lab, _| scaling(lab)),
        (5, "focal-sweep direction", |lab, _| focal_direction(lab)),
        (6, "NMS oracle", |_, _| nms_oracle()),
        (7, "loss identities", |_, _| loss_identities()),
        (8, "gradient check", |_, _| gradient_check()),
        (9, "target encoding", |_, _| target_encoding()),
        (10, "matching oracle", |_, _| matching_oracle()),
        (11, "decode geometry", |_, _| decode_geometry()),
        (12, "flood fill", |_, _| flood_fill()),
        (13, "round trips", |_, dir| round_trips(dir)),
    ];
    for (id, name, check) in criteria {
        if !wanted(id) {
            continue;
        }
        let v = check(&mut lab, scratch.path());
        println!("{} [{id:>2}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, v));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}

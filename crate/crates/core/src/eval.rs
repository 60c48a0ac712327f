//! Detection metrics under exclusive matching within `r_tp` grid units.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::catalog::PointRecord;

/// Pixel slack on the inclusive radius test, absorbing rounding in
/// coordinates built as `position + r_tp * spacing`.
pub const MATCH_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub prediction: usize,
    pub truth: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        precision(self.tp, self.fp, self.fn_)
    }

    pub fn recall(&self) -> f64 {
        recall(self.tp, self.fp, self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    /// Truth indices that found a partner.
    pub fn matched_truths(&self, n_truths: usize) -> Vec<bool> {
        let mut out = vec![false; n_truths];
        for p in &self.pairs {
            out[p.truth] = true;
        }
        out
    }
}

/// Greedy exclusive matching. Every prediction/truth pair within
/// `r_tp * spacing` pixels (inclusive, up to [`MATCH_SLACK`]) is a candidate; candidates are accepted
/// in ascending distance order, ties by prediction then truth index, whenever
/// both ends are still free.
pub fn match_points(predictions: &[PointRecord], truths: &[PointRecord], r_tp: f64, spacing: f64) -> MatchResult {
    let radius = r_tp * spacing + MATCH_SLACK;
    let mut candidates = Vec::new();
    if radius > 0.0 && radius.is_finite() {
        let cell = |p: &PointRecord| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (t, p) in truths.iter().enumerate() {
            buckets.entry(cell(p)).or_default().push(t);
        }
        for (pi, p) in predictions.iter().enumerate() {
            let (cx, cy) = cell(p);
            for gx in cx - 1..=cx + 1 {
                for gy in cy - 1..=cy + 1 {
                    for &ti in buckets.get(&(gx, gy)).into_iter().flatten() {
                        let d = p.distance(&truths[ti]);
                        if d <= radius {
                            candidates.push(MatchPair {
                                prediction: pi,
                                truth: ti,
                                distance: d,
                            });
                        }
                    }
                }
            }
        }
    } else {
        for (pi, p) in predictions.iter().enumerate() {
            for (ti, t) in truths.iter().enumerate() {
                let d = p.distance(t);
                if d <= radius {
                    candidates.push(MatchPair {
                        prediction: pi,
                        truth: ti,
                        distance: d,
                    });
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.prediction.cmp(&b.prediction))
            .then(a.truth.cmp(&b.truth))
    });
    let mut pred_used = vec![false; predictions.len()];
    let mut truth_used = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.prediction] && !truth_used[c.truth] {
            pred_used[c.prediction] = true;
            truth_used[c.truth] = true;
            pairs.push(c);
        }
    }
    MatchResult {
        tp: pairs.len(),
        fp: predictions.len() - pairs.len(),
        fn_: truths.len() - pairs.len(),
        pairs,
    }
}

/// `tp / (tp + fp)`; 1.0 when there are no predictions.
pub fn precision(tp: usize, fp: usize, _fn: usize) -> f64 {
    if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `tp / (tp + fn)`; 1.0 for an empty problem, 0.0 when only predictions exist.
pub fn recall(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxBin {
    /// Inclusive lower flux edge.
    pub lo: f64,
    /// Exclusive upper flux edge.
    pub hi: f64,
    pub truths: usize,
    pub detected: usize,
}

impl FluxBin {
    /// `None` for an empty bin.
    pub fn recall(&self) -> Option<f64> {
        (self.truths > 0).then(|| self.detected as f64 / self.truths as f64)
    }

    pub fn centre(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Edges separating the simulator's flux levels `(1 + k) / 3 * sigma`: the
/// midpoints between neighbours, extended by half a step at either end.
pub fn flux_bin_edges(n_bins: usize, sigma: f64) -> Vec<f64> {
    (0..=n_bins).map(|k| (k as f64 + 0.5) / 3.0 * sigma).collect()
}

/// Matches once, then tallies recall per truth flux bin. Truths outside every
/// bin are ignored.
pub fn recall_by_flux(
    predictions: &[PointRecord],
    truths: &[PointRecord],
    r_tp: f64,
    spacing: f64,
    edges: &[f64],
) -> Vec<FluxBin> {
    let m = match_points(predictions, truths, r_tp, spacing);
    tally_bins(truths, &m.matched_truths(truths.len()), edges)
}

pub fn tally_bins(truths: &[PointRecord], matched: &[bool], edges: &[f64]) -> Vec<FluxBin> {
    let mut bins: Vec<FluxBin> = edges
        .windows(2)
        .map(|w| FluxBin {
            lo: w[0],
            hi: w[1],
            truths: 0,
            detected: 0,
        })
        .collect();
    for (t, &hit) in truths.iter().zip(matched) {
        if let Some(b) = bins.iter_mut().find(|b| t.score >= b.lo && t.score < b.hi) {
            b.truths += 1;
            b.detected += hit as usize;
        }
    }
    bins
}

/// Adds `other`'s counts into `acc`, which must have the same edges.
pub fn merge_bins(acc: &mut [FluxBin], other: &[FluxBin]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.truths += b.truths;
        a.detected += b.detected;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtpPoint {
    pub r_tp: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RtpPoint {
    fn from_counts(r_tp: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let p = precision(tp, fp, fn_);
        let r = recall(tp, fp, fn_);
        Self {
            r_tp,
            tp,
            fp,
            fn_,
            precision: p,
            recall: r,
            f1: f1(p, r),
        }
    }

    /// Sums counts of two points at the same radius.
    pub fn merged(&self, other: &RtpPoint) -> RtpPoint {
        Self::from_counts(self.r_tp, self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Independent matching at each radius.
pub fn precision_vs_rtp(predictions: &[PointRecord], truths: &[PointRecord], radii: &[f64], spacing: f64) -> Vec<RtpPoint> {
    radii
        .iter()
        .map(|&r| {
            let m = match_points(predictions, truths, r, spacing);
            RtpPoint::from_counts(r, m.tp, m.fp, m.fn_)
        })
        .collect()
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Summary written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_tp: f64,
    pub spacing: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_bin: Vec<FluxBin>,
    pub per_rtp: Vec<RtpPoint>,
}

impl EvalReport {
    /// Builds the report for one image; `edges` and `radii` may be empty.
    pub fn build(predictions: &[PointRecord], truths: &[PointRecord], r_tp: f64, spacing: f64, edges: &[f64], radii: &[f64]) -> Self {
        let m = match_points(predictions, truths, r_tp, spacing);
        let per_bin = if edges.len() >= 2 {
            tally_bins(truths, &m.matched_truths(truths.len()), edges)
        } else {
            Vec::new()
        };
        EvalReport {
            r_tp,
            spacing,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            precision: m.precision(),
            recall: m.recall(),
            f1: m.f1(),
            per_bin,
            per_rtp: precision_vs_rtp(predictions, truths, radii, spacing),
        }
    }
}

//! Full-image detection: patching, batched forward passes, offset decoding and
//! global non-maximum suppression.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PointRecord};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::image::Image;
use crate::net::model::{Model, NetOutput};
use crate::net::tensor::Scalar;
use crate::skysim::patchify;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Pixels shared by neighbouring patches.
    pub overlap: usize,
    /// Suppression radius in grid units.
    pub r_nms: f64,
    /// Minimum confidence kept.
    pub c_nms: f64,
    /// Patches per forward call.
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            overlap: 4,
            r_nms: 0.35,
            c_nms: 0.8,
            batch_size: 32,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_nms > 0.0 && self.c_nms < 1.0) {
            return Err(Error::config("c_nms", format!("must lie in (0, 1), got {}", self.c_nms)));
        }
        if !(self.r_nms >= 0.0 && self.r_nms.is_finite()) {
            return Err(Error::config("r_nms", format!("must be non-negative, got {}", self.r_nms)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One proposal per origin in the image frame: `patch_origin +
/// origin_position(i, j) + offset * spacing`, scored by the origin's confidence.
pub fn decode(output: &NetOutput, grid: &GridSpec, patch_origin: (f64, f64)) -> Vec<PointRecord> {
    let s = grid.spacing();
    let mut out = Vec::with_capacity(output.grid_m * output.grid_n);
    for i in 0..output.grid_m {
        for j in 0..output.grid_n {
            let (dx, dy) = output.offset_at(i, j);
            let ox = (j as f64 + 0.5) * s;
            let oy = (i as f64 + 0.5) * s;
            out.push(PointRecord::new(
                patch_origin.0 + (ox + dx as f64 * s),
                patch_origin.1 + (oy + dy as f64 * s),
                output.confidence_at(i, j) as f64,
            ));
        }
    }
    out
}

/// Greedy suppression. Points below `c_nms` are dropped; then the most
/// confident remaining point is kept and every point strictly closer than
/// `r_nms * spacing` pixels is removed, until none remain. Confidence ties go
/// to the earlier point. Output is in selection order.
pub fn nms(points: &[PointRecord], r_nms: f64, c_nms: f64, spacing: f64) -> Vec<PointRecord> {
    let radius = r_nms * spacing;
    let mut order: Vec<usize> = (0..points.len()).filter(|&k| points[k].score >= c_nms).collect();
    order.sort_by(|&a, &b| points[b].score.total_cmp(&points[a].score));
    if radius <= 0.0 {
        return order.into_iter().map(|k| points[k]).collect();
    }

    let cell = |p: &PointRecord| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for &k in &order {
        buckets.entry(cell(&points[k])).or_default().push(k);
    }
    let mut removed = vec![false; points.len()];
    let mut kept = Vec::new();
    for &k in &order {
        if removed[k] {
            continue;
        }
        let p = points[k];
        kept.push(p);
        removed[k] = true;
        let (cx, cy) = cell(&p);
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(bucket) = buckets.get(&(gx, gy)) {
                    for &q in bucket {
                        if !removed[q] && p.distance(&points[q]) < radius {
                            removed[q] = true;
                        }
                    }
                }
            }
        }
    }
    kept
}

/// Wall-clock cost of each detection step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimes {
    pub patching: Duration,
    /// Forward passes and decoding.
    pub cnn: Duration,
    pub nms: Duration,
    pub total: Duration,
}

/// All decoded proposals for an image, in patch then origin order.
pub fn propose<S: Scalar>(model: &Model<S>, image: &Image, config: &InferConfig) -> Result<Vec<PointRecord>> {
    Ok(detect_timed(model, image, config, false)?.0)
}

pub fn detect<S: Scalar>(model: &Model<S>, image: &Image, config: &InferConfig) -> Result<Catalog> {
    let (points, _) = detect_timed(model, image, config, true)?;
    Ok(Catalog::detections(points))
}

/// Runs the pipeline and times each step. With `suppress` false the raw
/// proposals are returned and the NMS time is zero.
pub fn detect_timed<S: Scalar>(
    model: &Model<S>,
    image: &Image,
    config: &InferConfig,
    suppress: bool,
) -> Result<(Vec<PointRecord>, StepTimes)> {
    config.validate()?;
    let grid = model.grid();
    let start = Instant::now();
    let patches = patchify(image, grid.patch_size, config.overlap)?;
    let patching = start.elapsed();

    let t = Instant::now();
    let mut proposals = Vec::with_capacity(patches.len() * grid.origin_count());
    for chunk in patches.chunks(config.batch_size) {
        let refs: Vec<&Image> = chunk.iter().map(|p| &p.image).collect();
        for (patch, out) in chunk.iter().zip(model.predict(&refs)?) {
            let origin = (patch.origin.0 as f64, patch.origin.1 as f64);
            proposals.extend(decode(&out, &grid, origin));
        }
    }
    let cnn = t.elapsed();

    let t = Instant::now();
    let points = if suppress {
        nms(&proposals, config.r_nms, config.c_nms, grid.spacing())
    } else {
        proposals
    };
    let nms_time = if suppress { t.elapsed() } else { Duration::ZERO };
    let total = start.elapsed();
    Ok((
        points,
        StepTimes {
            patching,
            cnn,
            nms: nms_time,
            total,
        },
    ))
}

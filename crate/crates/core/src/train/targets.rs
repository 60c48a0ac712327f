//! Ground-truth encoding of a patch catalog onto the origin grid.

use crate::catalog::PointRecord;
use crate::error::{Error, Result};
use crate::geometry::GridSpec;

/// Slack on the inclusive `r_near` comparison so the equidistant cell-corner
/// case survives floating-point rounding.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Per-patch targets. Matrices are row-major `grid_m x grid_n`; `r_hat`
/// interleaves `(dx, dy)` per origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub grid_m: usize,
    pub grid_n: usize,
    pub c_hat: Vec<u8>,
    pub r_hat: Vec<f64>,
    pub b: Vec<u8>,
    pub b_star: Vec<u8>,
    /// Grid-unit distance from each origin to its nearest source (infinite
    /// when the patch is empty).
    pub nearest: Vec<f64>,
}

impl TargetMaps {
    pub fn len(&self) -> usize {
        self.grid_m * self.grid_n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.c_hat.iter().filter(|&&v| v == 1).count()
    }

    pub fn contributing(&self) -> usize {
        self.b.iter().filter(|&&v| v == 1).count()
    }
}

/// Encodes `truth` (patch pixel frame) into targets. An origin is positive
/// when its nearest source lies within `r_near` grid units (inclusive); its
/// offset then points at that source. Origins farther than `r_far` are
/// negatives; those in between are ignored by both loss terms.
pub fn encode_targets(truth: &[PointRecord], grid: &GridSpec, r_near: f64, r_far: f64) -> Result<TargetMaps> {
    if !(r_near > 0.0 && r_near.is_finite()) {
        return Err(Error::arg("r_near", format!("must be positive, got {r_near}")));
    }
    if !(r_far >= r_near && r_far.is_finite()) {
        return Err(Error::arg("r_far", format!("must be >= r_near ({r_near}), got {r_far}")));
    }
    let (m, n) = (grid.grid_m, grid.grid_n);
    let s = grid.spacing();
    let mut t = TargetMaps {
        grid_m: m,
        grid_n: n,
        c_hat: vec![0; m * n],
        r_hat: vec![0.0; m * n * 2],
        b: vec![1; m * n],
        b_star: vec![0; m * n],
        nearest: vec![f64::INFINITY; m * n],
    };
    for i in 0..m {
        for j in 0..n {
            let (ox, oy) = grid.origin_position(i, j)?;
            let k = i * n + j;
            let mut best: Option<(f64, f64, f64)> = None;
            for p in truth {
                let dx = (p.x - ox) / s;
                let dy = (p.y - oy) / s;
                let d = dx.hypot(dy);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, dx, dy));
                }
            }
            let Some((d, dx, dy)) = best else { continue };
            t.nearest[k] = d;
            if d <= r_near + BOUNDARY_SLACK {
                t.c_hat[k] = 1;
                t.b_star[k] = 1;
                t.r_hat[2 * k] = dx;
                t.r_hat[2 * k + 1] = dy;
            } else if d <= r_far {
                t.b[k] = 0;
            }
        }
    }
    Ok(t)
}

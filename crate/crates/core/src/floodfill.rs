//! Thresholded blob detection: binarise, extract connected islands with an
//! explicit-stack flood fill, drop small islands and report centroids.

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PointRecord};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// A connected component of above-threshold pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Island {
    /// `(row, col)` of every member pixel, in fill order.
    pub pixels: Vec<(u32, u32)>,
    /// Unweighted mean pixel position `(x, y)`.
    pub centroid: (f64, f64),
    pub peak: f32,
}

impl Island {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    fn record(&self) -> PointRecord {
        PointRecord::new(self.centroid.0, self.centroid.1, self.peak as f64)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::arg("tau", format!("must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Islands of pixels `>= tau` with at least `min_area` pixels, seeded in
/// row-major order.
pub fn islands(image: &Image, tau: f64, min_area: usize, connectivity: Connectivity) -> Result<Vec<Island>> {
    check_tau(tau)?;
    let (_, found) = label(image, tau, min_area, connectivity, 0..image.width() * image.height());
    Ok(found)
}

/// Labels islands starting seeds in `order`. Returns a label map (0 for
/// background or discarded islands, `k + 1` for island `k`) and the islands.
fn label(
    image: &Image,
    tau: f64,
    min_area: usize,
    connectivity: Connectivity,
    order: impl Iterator<Item = usize>,
) -> (Vec<u32>, Vec<Island>) {
    const UNSEEN: u32 = u32::MAX;
    let (w, h) = (image.width(), image.height());
    let values = image.values();
    let tau = tau as f32;
    let mut labels: Vec<u32> = values.iter().map(|&v| if v >= tau { UNSEEN } else { 0 }).collect();
    let mut found = Vec::new();
    let mut stack: Vec<u32> = Vec::new();
    let mut pixels: Vec<(u32, u32)> = Vec::new();
    for seed in order {
        if labels[seed] != UNSEEN {
            continue;
        }
        let id = found.len() as u32 + 1;
        labels[seed] = id;
        stack.push(seed as u32);
        pixels.clear();
        let (mut sx, mut sy, mut peak) = (0.0f64, 0.0f64, f32::NEG_INFINITY);
        while let Some(k) = stack.pop() {
            let k = k as usize;
            let (x, y) = (k % w, k / w);
            pixels.push((y as u32, x as u32));
            sx += x as f64;
            sy += y as f64;
            peak = peak.max(values[k]);
            for &(dx, dy) in connectivity.offsets() {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let nk = ny as usize * w + nx as usize;
                if labels[nk] == UNSEEN {
                    labels[nk] = id;
                    stack.push(nk as u32);
                }
            }
        }
        if pixels.len() >= min_area {
            let n = pixels.len() as f64;
            found.push(Island {
                pixels: pixels.clone(),
                centroid: (sx / n, sy / n),
                peak,
            });
        } else {
            for &(r, c) in &pixels {
                labels[r as usize * w + c as usize] = 0;
            }
        }
    }
    (labels, found)
}

/// Single-threshold detection: one record per island at its centroid,
/// scored by the island's peak value.
pub fn threshold_blob_detect(image: &Image, tau: f64, min_area: usize, connectivity: Connectivity) -> Result<Catalog> {
    Ok(Catalog::detections(
        islands(image, tau, min_area, connectivity)?.iter().map(Island::record).collect(),
    ))
}

/// `n` logarithmically spaced thresholds from `lo` to `hi` inclusive,
/// descending.
pub fn log_thresholds(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
        }
    };
    if n > 1 {
        v[0] = lo;
        v[n - 1] = hi;
    }
    v.reverse();
    v
}

/// Multi-threshold detection with split-driven refinement. Islands at the
/// lowest threshold are roots; an island is replaced by its islands at the
/// next higher threshold only when there are two or more of them, following
/// single-child chains upward. Otherwise the lowest-threshold island of the
/// chain is reported.
pub fn multi_threshold_detect(
    image: &Image,
    thresholds: &[f64],
    min_area: usize,
    connectivity: Connectivity,
) -> Result<Catalog> {
    if thresholds.is_empty() {
        return Err(Error::arg("thresholds", "at least one threshold is required"));
    }
    let mut taus = thresholds.to_vec();
    for &t in &taus {
        check_tau(t)?;
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let n = image.width() * image.height();
    let levels: Vec<(Vec<u32>, Vec<Island>)> = taus
        .iter()
        .map(|&t| label(image, t, min_area, connectivity, 0..n))
        .collect();
    let w = image.width();

    let children = |level: usize, island: &Island| -> Vec<usize> {
        let labels = &levels[level + 1].0;
        let mut ids: Vec<usize> = island
            .pixels
            .iter()
            .map(|&(r, c)| labels[r as usize * w + c as usize])
            .filter(|&l| l != 0)
            .map(|l| l as usize - 1)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };

    let mut out = Vec::new();
    let mut work: Vec<(usize, usize)> = (0..levels[0].1.len()).rev().map(|k| (0, k)).collect();
    while let Some((level, id)) = work.pop() {
        let top = &levels[level].1[id];
        let (mut lvl, mut cur) = (level, id);
        let emitted = loop {
            if lvl + 1 == levels.len() {
                break true;
            }
            let kids = children(lvl, &levels[lvl].1[cur]);
            match kids.len() {
                0 => break true,
                1 => {
                    lvl += 1;
                    cur = kids[0];
                }
                _ => {
                    work.extend(kids.into_iter().rev().map(|k| (lvl + 1, k)));
                    break false;
                }
            }
        };
        if emitted {
            out.push(top.record());
        }
    }
    Ok(Catalog::detections(out))
}

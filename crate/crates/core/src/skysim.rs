//! Synthetic survey images: Gaussian-PSF point sources on white Gaussian noise,
//! with peak fluxes drawn from equally populated discrete flux bins.
//!
//! Pixel `(x, y)` samples the sky at the continuous position `(x, y)`, so a
//! source injected at integer coordinates peaks exactly on that pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PointRecord};
use crate::error::{Error, Result};
use crate::image::Image;

/// FWHM to standard deviation of a Gaussian: `2 * sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Sources per 1024x1024 pixels used when scaling workloads with image area.
pub const SOURCES_PER_1024_SQ: f64 = 135.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub image_size: usize,
    pub n_sources: usize,
    pub n_bins: usize,
    /// Background rms in flux units.
    pub sigma: f64,
    /// PSF full width at half maximum, pixels.
    pub psf_fwhm: f64,
    pub seed: u64,
    pub allow_overlap: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_size: 1024,
            n_sources: 135,
            n_bins: 30,
            sigma: 1.0,
            psf_fwhm: 3.0,
            seed: 0,
            allow_overlap: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::config("n_bins", "must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be positive"));
        }
        if !(self.psf_fwhm > 0.0 && self.psf_fwhm.is_finite()) {
            return Err(Error::config("psf_fwhm", "must be positive"));
        }
        let footprint = 2 * render_radius(self.psf_fwhm) + 1;
        if self.image_size < footprint {
            return Err(Error::arg(
                "image_size",
                format!(
                    "{} px cannot hold a {footprint} px PSF footprint (fwhm {})",
                    self.image_size, self.psf_fwhm
                ),
            ));
        }
        Ok(())
    }
}

/// Source count holding the default density fixed for an `size x size` image.
pub fn density_scaled_sources(size: usize) -> usize {
    let r = size as f64 / 1024.0;
    (SOURCES_PER_1024_SQ * r * r).round() as usize
}

/// Peak flux of each bin: `J_k = (1/3 + k/3) * sigma`.
pub fn flux_bins(n_bins: usize, sigma: f64) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::arg("n_bins", "must be at least 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg("sigma", "must be positive"));
    }
    Ok((0..n_bins).map(|k| (1.0 + k as f64) / 3.0 * sigma).collect())
}

fn render_radius(fwhm: f64) -> usize {
    (5.0 * fwhm / FWHM_PER_SIGMA).ceil() as usize
}

/// Draws source positions and fluxes, then renders the image.
///
/// Sources are assigned to flux bins round-robin (source `k` goes to bin
/// `k mod n_bins`), so bin populations differ by at most one. With
/// `allow_overlap` off, positions closer than one FWHM to an earlier source
/// are redrawn.
pub fn simulate(config: &SimConfig) -> Result<(Image, Catalog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fluxes = flux_bins(config.n_bins, config.sigma)?;
    let size = config.image_size as f64;
    let mut sources: Vec<PointRecord> = Vec::with_capacity(config.n_sources);
    for k in 0..config.n_sources {
        let flux = fluxes[k % config.n_bins];
        let mut attempts = 0;
        let (x, y) = loop {
            let x: f64 = rng.random_range(0.0..size);
            let y: f64 = rng.random_range(0.0..size);
            attempts += 1;
            let clear = config.allow_overlap
                || sources
                    .iter()
                    .all(|s| (s.x - x).hypot(s.y - y) >= config.psf_fwhm);
            if clear || attempts >= 1000 {
                break (x, y);
            }
        };
        sources.push(PointRecord::new(x, y, flux));
    }
    render(config, &sources, &mut rng)
}

/// Renders explicitly placed sources (fluxes in `score`) over fresh noise.
pub fn simulate_with_sources(config: &SimConfig, sources: &[PointRecord]) -> Result<(Image, Catalog)> {
    config.validate()?;
    for (k, s) in sources.iter().enumerate() {
        let size = config.image_size as f64;
        if !(s.x >= 0.0 && s.x < size && s.y >= 0.0 && s.y < size && s.score > 0.0) {
            return Err(Error::arg("sources", format!("source {k} is off-image or has non-positive flux")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    render(config, sources, &mut rng)
}

fn render(config: &SimConfig, sources: &[PointRecord], rng: &mut ChaCha8Rng) -> Result<(Image, Catalog)> {
    let n = config.image_size;
    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::config("sigma", e.to_string()))?;
    let mut sky: Vec<f64> = (0..n * n).map(|_| noise.sample(rng)).collect();
    for s in sources {
        add_gaussian(&mut sky, n, s, config.psf_fwhm);
    }
    let mut image = Image::new(n, n, sky.into_iter().map(|v| v as f32).collect())?;
    image.rms_sigma = Some(config.sigma);
    Ok((image.normalized(), Catalog::truth(sources.to_vec())))
}

fn add_gaussian(sky: &mut [f64], n: usize, s: &PointRecord, fwhm: f64) {
    let sd = fwhm / FWHM_PER_SIGMA;
    let inv = 1.0 / (2.0 * sd * sd);
    let r = render_radius(fwhm) as isize;
    let (cx, cy) = (s.x.round() as isize, s.y.round() as isize);
    let lo_y = (cy - r).max(0);
    let hi_y = (cy + r).min(n as isize - 1);
    let lo_x = (cx - r).max(0);
    let hi_x = (cx + r).min(n as isize - 1);
    for py in lo_y..=hi_y {
        let dy = py as f64 - s.y;
        for px in lo_x..=hi_x {
            let dx = px as f64 - s.x;
            sky[py as usize * n + px as usize] += s.score * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// A patch cut from a larger image and the pixel position of its top-left corner.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Image,
    pub origin: (usize, usize),
}

/// Start offsets along one axis: stride `patch - overlap`, with the last patch
/// clamped so its far edge meets the image edge.
pub fn patch_starts(len: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(Error::arg("patch_size", format!("patch of {patch} px does not fit in {len} px")));
    }
    if overlap >= patch {
        return Err(Error::arg("overlap", format!("overlap {overlap} must be below patch size {patch}")));
    }
    let stride = patch - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= len {
            starts.push(len - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    Ok(starts)
}

/// Top-left corners of every patch in row-major order.
pub fn patch_origins(width: usize, height: usize, patch: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let xs = patch_starts(width, patch, overlap)?;
    let ys = patch_starts(height, patch, overlap)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Tiles `image` into `patch_size` squares, row-major.
pub fn patchify(image: &Image, patch_size: usize, overlap: usize) -> Result<Vec<Patch>> {
    patch_origins(image.width(), image.height(), patch_size, overlap)?
        .into_iter()
        .map(|(x, y)| {
            Ok(Patch {
                image: image.crop(x, y, patch_size, patch_size)?,
                origin: (x, y),
            })
        })
        .collect()
}

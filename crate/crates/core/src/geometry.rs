//! Origin-lattice geometry linking patch pixels to the network's output grid.
//!
//! Conventions used throughout the crate:
//!
//! * `x` is the column coordinate and `y` the row coordinate, measured in
//!   pixels from the top-left corner of the image (or patch).
//! * Origin `(i, j)` (row `i`, column `j`) sits at the centre of its lattice
//!   cell, `((j + 0.5) * spacing, (i + 0.5) * spacing)`.
//! * Offsets and radii are in *grid units*: an offset of `1.0` spans exactly
//!   one origin step (`spacing` pixels), so it lands on the neighbouring origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius that reaches every pixel of the lattice from its nearest origin:
/// the distance from an origin to the centre of a group of four origins.
pub const R_NEAR_DEFAULT: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Geometry of the origin lattice of one network input patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_size: usize,
    pub grid_m: usize,
    pub grid_n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            patch_size: 224,
            grid_m: 7,
            grid_n: 7,
        }
    }
}

impl GridSpec {
    pub fn new(patch_size: usize, grid_m: usize, grid_n: usize) -> Result<Self> {
        let grid = Self {
            patch_size,
            grid_m,
            grid_n,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.grid_m == 0 || self.grid_n == 0 {
            return Err(Error::config("grid", "patch size and grid dimensions must be positive"));
        }
        if self.patch_size % self.grid_m != 0 {
            return Err(Error::config(
                "grid_m",
                format!("patch size {} is not a multiple of {}", self.patch_size, self.grid_m),
            ));
        }
        if self.patch_size % self.grid_n != 0 {
            return Err(Error::config(
                "grid_n",
                format!("patch size {} is not a multiple of {}", self.patch_size, self.grid_n),
            ));
        }
        // Radii are isotropic in grid units, so both axes must share one spacing.
        if self.grid_m != self.grid_n {
            return Err(Error::config(
                "grid_n",
                format!("non-square origin grid {}x{} is not supported", self.grid_m, self.grid_n),
            ));
        }
        Ok(())
    }

    /// Pixels per origin step.
    pub fn spacing(&self) -> f64 {
        (self.patch_size / self.grid_m) as f64
    }

    pub fn origin_count(&self) -> usize {
        self.grid_m * self.grid_n
    }

    /// Pixel-frame centre of origin `(i, j)` within the patch.
    pub fn origin_position(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        if i >= self.grid_m {
            return Err(Error::arg("i", format!("row {i} outside 0..{}", self.grid_m)));
        }
        if j >= self.grid_n {
            return Err(Error::arg("j", format!("column {j} outside 0..{}", self.grid_n)));
        }
        let s = self.spacing();
        Ok(((j as f64 + 0.5) * s, (i as f64 + 0.5) * s))
    }

    /// Denormalises a grid-unit offset from origin `(i, j)` into patch pixels.
    pub fn grid_to_pixel(&self, origin: (usize, usize), offset: (f64, f64)) -> Result<(f64, f64)> {
        if !offset.0.is_finite() || !offset.1.is_finite() {
            return Err(Error::arg("offset", "offset components must be finite"));
        }
        let (ox, oy) = self.origin_position(origin.0, origin.1)?;
        let s = self.spacing();
        Ok((ox + offset.0 * s, oy + offset.1 * s))
    }

    /// Grid-unit offset from origin `(i, j)` to a patch-pixel position.
    pub fn pixel_to_offset(&self, origin: (usize, usize), point: (f64, f64)) -> Result<(f64, f64)> {
        let (ox, oy) = self.origin_position(origin.0, origin.1)?;
        let s = self.spacing();
        Ok(((point.0 - ox) / s, (point.1 - oy) / s))
    }
}

//! Flux images and their on-disk format.
//!
//! Binary layout (little-endian): the 8 magic bytes `PPNIMG1\0`, `u32` width,
//! `u32` height, then `width * height` `f32` values in row-major order with the
//! top row first. An optional `<name>.meta.json` sidecar carries `rms_sigma`
//! and `seed`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"PPNIMG1\0";

/// A 2-D grid of finite flux values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f32>,
    /// Background rms in the same units as `values`, when known.
    pub rms_sigma: Option<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg("width/height", "image dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::Shape {
                expected: format!("{} values ({width}x{height})", width * height),
                got: format!("{} values", values.len()),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value at pixel ({}, {})",
                k % width,
                k / width
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            rms_sigma: None,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Linearly rescales values into `[0, 1]`. A constant image maps to zeros.
    /// `rms_sigma` is rescaled along with the values.
    pub fn normalized(&self) -> Image {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        if range <= 0.0 {
            return Image {
                width: self.width,
                height: self.height,
                values: vec![0.0; self.values.len()],
                rms_sigma: self.rms_sigma.map(|_| 0.0),
            };
        }
        let range = range as f64;
        let values = self
            .values
            .iter()
            .map(|&v| (((v - lo) as f64) / range).clamp(0.0, 1.0) as f32)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            values,
            rms_sigma: self.rms_sigma.map(|s| s / range),
        }
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::arg(
                "window",
                format!(
                    "{w}x{h} window at ({x0}, {y0}) exceeds {}x{} image",
                    self.width, self.height
                ),
            ));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Image {
            width: w,
            height: h,
            values,
            rms_sigma: self.rms_sigma,
        })
    }

    /// Rotates by 90 degrees counter-clockwise: pixel `(x, y)` moves to
    /// `(y, width - 1 - x)`.
    pub fn rotate90(&self) -> Image {
        let (w, h) = (self.width, self.height);
        let mut values = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (y, w - 1 - x);
                values[ny * h + nx] = self.values[y * w + x];
            }
        }
        Image {
            width: h,
            height: w,
            values,
            rms_sigma: self.rms_sigma,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 16 {
            return Err(Error::format("header", "file shorter than 16-byte header"));
        }
        if &bytes[..8] != IMAGE_MAGIC {
            return Err(Error::format("magic", "expected PPNIMG1"));
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("header", "dimensions overflow"))?;
        let body = &bytes[16..];
        if body.len() != expected {
            return Err(Error::format(
                "pixels",
                format!("expected {expected} bytes for {width}x{height}, found {}", body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Image::new(width, height, values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { entry, reason } => Error::Format {
                entry: format!("{} ({entry})", path.display()),
                reason,
            },
            other => other,
        })
    }

    /// Reads an image and, if present, its metadata sidecar.
    pub fn read_with_meta(path: impl AsRef<Path>) -> Result<(Image, Option<ImageMeta>)> {
        let path = path.as_ref();
        let mut image = Image::read(path)?;
        let meta_path = meta_path_for(path);
        let meta = if meta_path.exists() {
            let meta = ImageMeta::read(&meta_path)?;
            image.rms_sigma = meta.rms_sigma;
            Some(meta)
        } else {
            None
        };
        Ok((image, meta))
    }
}

/// Sidecar metadata stored next to an image file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ImageMeta {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<ImageMeta> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// `dir/img_00001.ppn` -> `dir/img_00001.meta.json`.
pub fn meta_path_for(image_path: &Path) -> PathBuf {
    image_path.with_extension("meta.json")
}

/// Robust background rms from the median absolute deviation, for images whose
/// noise level is not known by construction.
pub fn estimate_rms_mad(image: &Image) -> f64 {
    let mut v: Vec<f32> = image.values().to_vec();
    let median = median_in_place(&mut v);
    let mut dev: Vec<f32> = image.values().iter().map(|&x| (x - median).abs()).collect();
    1.482_602_218_505_602 * median_in_place(&mut dev) as f64
}

fn median_in_place(v: &mut [f32]) -> f32 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        0.5 * (lower + upper)
    }
}

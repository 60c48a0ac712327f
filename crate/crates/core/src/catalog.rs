//! Point catalogs: truth source lists and detections, stored as `x,y,score` CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One point in pixel coordinates. `score` is the peak flux `J` for truth
/// records and the confidence for detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl PointRecord {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }

    #[inline]
    pub fn distance(&self, other: &PointRecord) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            score: self.score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CatalogKind {
    Truth,
    Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub kind: CatalogKind,
    pub records: Vec<PointRecord>,
}

impl Catalog {
    pub fn new(kind: CatalogKind, records: Vec<PointRecord>) -> Self {
        Self { kind, records }
    }

    pub fn truth(records: Vec<PointRecord>) -> Self {
        Self::new(CatalogKind::Truth, records)
    }

    pub fn detections(records: Vec<PointRecord>) -> Self {
        Self::new(CatalogKind::Detection, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PointRecord> {
        self.records.iter()
    }

    /// Records falling inside the `w x h` window at `(x0, y0)`, shifted into
    /// the window's frame.
    pub fn window(&self, x0: f64, y0: f64, w: f64, h: f64) -> Vec<PointRecord> {
        self.records
            .iter()
            .filter(|r| r.x >= x0 && r.x < x0 + w && r.y >= y0 && r.y < y0 + h)
            .map(|r| r.translated(-x0, -y0))
            .collect()
    }

    /// Checks the per-kind score contract and that positions lie inside a
    /// `width x height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for (k, r) in self.records.iter().enumerate() {
            if !(r.x >= 0.0 && r.x < width as f64 && r.y >= 0.0 && r.y < height as f64) {
                return Err(Error::Domain(format!(
                    "record {k} at ({}, {}) outside {width}x{height} image",
                    r.x, r.y
                )));
            }
            let ok = match self.kind {
                CatalogKind::Truth => r.score > 0.0,
                CatalogKind::Detection => r.score > 0.0 && r.score < 1.0,
            };
            if !ok {
                return Err(Error::Domain(format!("record {k} has invalid score {}", r.score)));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x,y,score\n");
        for r in &self.records {
            out.push_str(&format!("{:.6},{:.6},{:.8}\n", r.x, r.y, r.score));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, kind: CatalogKind) -> Result<Catalog> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let headers = reader.headers().map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "score"] {
            return Err(Error::format(
                path.display().to_string(),
                format!("expected header `x,y,score`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<PointRecord>, _>>()
            .map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(Catalog::new(kind, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let cat = Catalog::truth(vec![PointRecord::new(1.23456789, 2.0, 10.0 / 3.0)]);
        cat.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x,y,score\n1.234568,2.000000,"));
        let back = Catalog::read_csv(&p, CatalogKind::Truth).unwrap();
        assert!((back.records[0].x - 1.23456789).abs() < 1e-6);
        assert!((back.records[0].score - 10.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert!(Catalog::read_csv(&p, CatalogKind::Detection).is_err());
    }

    #[test]
    fn window_shifts_into_frame() {
        let cat = Catalog::truth(vec![
            PointRecord::new(10.0, 10.0, 1.0),
            PointRecord::new(230.0, 5.0, 1.0),
            PointRecord::new(224.0, 0.0, 1.0),
        ]);
        let w = cat.window(220.0, 0.0, 224.0, 224.0);
        assert_eq!(w, vec![PointRecord::new(10.0, 5.0, 1.0), PointRecord::new(4.0, 0.0, 1.0)]);
    }

    #[test]
    fn validation_by_kind() {
        let det = Catalog::detections(vec![PointRecord::new(1.0, 1.0, 1.0)]);
        assert!(det.validate(4, 4).is_err());
        let det = Catalog::detections(vec![PointRecord::new(1.0, 1.0, 0.9)]);
        assert!(det.validate(4, 4).is_ok());
        assert!(det.validate(1, 1).is_err());
    }
}

//! `.ppnmodel` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PPNMODL1"
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (NetConfig)
//! entry_count  u32
//! entry*       name_len u32, name bytes, ndim u32, dims u32 x ndim, values f32 x prod(dims)
//! ```
//!
//! Entries hold every trainable parameter followed by the batch-norm running
//! statistics, each under its dotted name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::model::{Model, NetConfig};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;

pub const MODEL_MAGIC: &[u8; 8] = b"PPNMODL1";

struct Entry {
    shape: Vec<usize>,
    values: Vec<f32>,
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut model = model.clone();
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |name, p| entries.push((name.to_string(), p.shape.clone(), p.value.clone())));
    model.visit_buffers(&mut |name, b| entries.push((name.to_string(), vec![b.len()], b.clone())));

    let config = serde_json::to_vec(model.config()).expect("NetConfig serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, values) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(what, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "header")? != MODEL_MAGIC {
        return Err(Error::format("header", "bad magic; not a .ppnmodel file"));
    }
    let config_len = r.u32("config")?;
    let config: NetConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let count = r.u32("entry count")?;
    let mut entries = BTreeMap::new();
    for k in 0..count {
        let what = format!("entry {k}");
        let name_len = r.u32(&what)?;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::format(&what, "name is not UTF-8"))?
            .to_string();
        let ndim = r.u32(&name)?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32(&name)?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(&name, "shape overflows"))?;
        let raw = r.take(len, &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if entries.insert(name.clone(), Entry { shape, values }).is_some() {
            return Err(Error::format(name, "duplicate entry"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::<f32>::build(&config, 0).map_err(|e| Error::format("config", e.to_string()))?;
    let mut failure: Option<Error> = None;
    let mut fill = |name: &str, shape: &[usize], dst: &mut Vec<f32>| {
        if failure.is_some() {
            return;
        }
        match entries.remove(name) {
            None => failure = Some(Error::format(name, "missing entry")),
            Some(e) if e.shape != shape => {
                failure = Some(Error::format(name, format!("shape {:?}, expected {:?}", e.shape, shape)))
            }
            Some(e) => *dst = e.values,
        }
    };
    model.visit_params(&mut |name, p| {
        let shape = p.shape.clone();
        fill(name, &shape, &mut p.value)
    });
    model.visit_buffers(&mut |name, b| {
        let shape = [b.len()];
        fill(name, &shape, b)
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::format(name.clone(), "unknown entry"));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { entry, reason } => Error::format(format!("{} ({entry})", path.display()), reason),
        other => other,
    })
}

/// Loads a model and checks that its grid matches `expected`.
pub fn load_for_grid(path: impl AsRef<Path>, expected: &GridSpec) -> Result<Model<f32>> {
    let model = load(path)?;
    let got = model.grid();
    let checks = [
        ("grid.patch_size", got.patch_size, expected.patch_size),
        ("grid.grid_m", got.grid_m, expected.grid_m),
        ("grid.grid_n", got.grid_n, expected.grid_n),
    ];
    for (field, g, e) in checks {
        if g != e {
            return Err(Error::config(field, format!("model has {g}, expected {e}")));
        }
    }
    Ok(model)
}

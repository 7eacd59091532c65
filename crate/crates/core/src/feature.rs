//! Dense patch-feature grids and the `OVFT` tensor file format.
//!
//! An `OVFT` file is laid out as:
//!
//! | offset | size      | content                                  |
//! |--------|-----------|------------------------------------------|
//! | 0      | 4         | magic `b"OVFT"`                          |
//! | 4      | 4         | format version, `u32` LE (currently 1)   |
//! | 8      | 12        | `height`, `width`, `dim` as `u32` LE     |
//! | 20     | 4·h·w·d   | `f32` LE values, row-major `[h][w][d]`   |
//!
//! Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OVFT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// A `height × width × dim` grid of finite `f32` features stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be >= 1, got {height}x{width}x{dim}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::Shape("feature map too large".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { height, width, dim, data })
    }

    /// A map whose every cell holds `vector`.
    pub fn constant(height: usize, width: usize, vector: &[f32]) -> Result<Self> {
        let data = vector
            .iter()
            .copied()
            .cycle()
            .take(height * width * vector.len())
            .collect();
        Self::new(height, width, vector.len(), data)
    }

    /// A map of zeros.
    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Overwrites one cell. Non-finite values are rejected.
    pub fn set(&mut self, y: usize, x: usize, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} written into map of dim {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        let start = (y * self.width + x) * self.dim;
        self.data[start..start + self.dim].copy_from_slice(vector);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in [self.height, self.width, self.dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format("magic", "truncated: file shorter than magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(
                "magic",
                format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                "header",
                format!("truncated: header needs {HEADER_LEN} bytes, found {}", bytes.len()),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let (h, w, d) = (word(8) as usize, word(12) as usize, word(16) as usize);
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::format("dims", format!("zero dimension in {h}x{w}x{d}")));
        }
        let count = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .ok_or_else(|| Error::format("dims", "dimension product overflows"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < count * 4 {
            return Err(Error::format(
                "payload",
                format!("truncated: expected {} bytes, found {}", count * 4, payload.len()),
            ));
        }
        if payload.len() > count * 4 {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes after payload", payload.len() - count * 4),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format("payload", format!("non-finite value at index {i}")));
            }
            data.push(v);
        }
        Ok(Self { height: h, width: w, dim: d, data })
    }
}

pub fn write_feature_map(map: &FeatureMap, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(source: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = source.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes).map_err(|e| e.in_file(path))
}

/// One output coordinate's interpolation taps along an axis: the two source
/// indices and the weight of the upper one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Corner-aligned sampling positions: output index 0 maps onto source index 0
/// and output index `n_out - 1` onto `n_in - 1`.
pub(crate) fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return Tap { lo: 0, hi: 0, frac: 0.0 };
            }
            let src = (o * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Per-channel bilinear interpolation of `map` to `target_h × target_w`, with
/// corner-aligned sampling.
pub fn upsample_bilinear(map: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape(format!("target size {target_h}x{target_w} is empty")));
    }
    let ys = axis_taps(map.height, target_h);
    let xs = axis_taps(map.width, target_w);
    let d = map.dim;
    let mut data = Vec::with_capacity(target_h * target_w * d);
    for ty in &ys {
        for tx in &xs {
            let a = map.at(ty.lo, tx.lo);
            let b = map.at(ty.lo, tx.hi);
            let c = map.at(ty.hi, tx.lo);
            let e = map.at(ty.hi, tx.hi);
            for ch in 0..d {
                let top = (1.0 - tx.frac) * a[ch] as f64 + tx.frac * b[ch] as f64;
                let bottom = (1.0 - tx.frac) * c[ch] as f64 + tx.frac * e[ch] as f64;
                data.push(((1.0 - ty.frac) * top + ty.frac * bottom) as f32);
            }
        }
    }
    FeatureMap::new(target_h, target_w, d, data)
}

//! Binary instance masks, label rasters, and their JSON sidecars.
//!
//! Masks are persisted as run lengths over row-major pixel order. Runs
//! alternate background/foreground and always start with a background run,
//! which may be zero: a 1×4 row `0110` is `[1, 2, 1]`, an all-foreground
//! 2×2 mask is `[0, 4]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run-length encodes a row-major binary grid.
pub fn encode_runs(pixels: impl IntoIterator<Item = bool>) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for p in pixels {
        if p != current {
            runs.push(len);
            current = p;
            len = 0;
        }
        len += 1;
    }
    if len > 0 || runs.is_empty() {
        runs.push(len);
    }
    runs
}

/// Inverse of [`encode_runs`]. The runs must cover exactly `len` pixels.
pub fn decode_runs(runs: &[u64], len: usize) -> Result<Vec<bool>> {
    let total: u128 = runs.iter().map(|&r| r as u128).sum();
    if total != len as u128 {
        return Err(Error::format(
            "runs",
            format!("run lengths sum to {total}, expected {len} pixels"),
        ));
    }
    let mut out = Vec::with_capacity(len);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Ok(out)
}

/// A binary mask at image resolution, bit-packed row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for InstanceMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstanceMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl InstanceMask {
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask dimensions must be >= 1, got {height}x{width}")));
        }
        Ok(Self { height, width, words: vec![0; (height * width).div_ceil(64)] })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_fn(height, width, |_, _| true)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut mask = Self::empty(height, width)?;
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
        Ok(mask)
    }

    /// Foreground on the half-open rectangle `[y0, y1) × [x0, x1)`, clipped to the image.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Self> {
        Self::from_fn(height, width, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[bool]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels given for a {height}x{width} mask",
                pixels.len()
            )));
        }
        let mut mask = Self::empty(height, width)?;
        for (i, _) in pixels.iter().enumerate().filter(|(_, p)| **p) {
            mask.words[i / 64] |= 1 << (i % 64);
        }
        Ok(mask)
    }

    pub fn from_runs(height: usize, width: usize, runs: &[u64]) -> Result<Self> {
        let pixels = decode_runs(runs, height * width)?;
        Self::from_pixels(height, width, &pixels)
    }

    pub fn runs(&self) -> Vec<u64> {
        encode_runs(self.pixels())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        let i = y * self.width + x;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Row-major pixel values.
    pub fn pixels(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.height * self.width).map(move |i| self.words[i / 64] >> (i % 64) & 1 == 1)
    }

    /// `(y, x)` of every foreground pixel in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some((i / w, i % w))
            })
        })
    }

    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.union_area(other)?;
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersect_with(&mut self, other: &Self) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &Self) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0))
    }
}

/// An ordered collection of masks sharing one image size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    masks: Vec<InstanceMask>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, masks: Vec<InstanceMask>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask set dimensions must be >= 1, got {height}x{width}")));
        }
        if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.dims() != (height, width)) {
            return Err(Error::Shape(format!(
                "mask {i} is {}x{}, set is {height}x{width}",
                m.height(),
                m.width()
            )));
        }
        Ok(Self { height, width, masks })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn masks(&self) -> &[InstanceMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<InstanceMask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn push(&mut self, mask: InstanceMask) -> Result<()> {
        if mask.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "mask {}x{} pushed into {}x{} set",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        self.masks.push(mask);
        Ok(())
    }

    /// Union of all members.
    pub fn union(&self) -> InstanceMask {
        let mut out = InstanceMask::empty(self.height, self.width).expect("dims checked at construction");
        for m in &self.masks {
            out.union_with(m).expect("dims checked at construction");
        }
        out
    }
}

/// On-disk form of a mask set:
/// `{"height": H, "width": W, "instances": [{"runs": [...], "score": 0.3}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<MaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub runs: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl MaskFile {
    pub fn from_set(set: &MaskSet, scores: Option<&[f64]>) -> Self {
        let instances = set
            .masks()
            .iter()
            .enumerate()
            .map(|(i, m)| MaskRecord { runs: m.runs(), score: scores.map(|s| s[i]) })
            .collect();
        Self { height: set.height(), width: set.width(), instances }
    }

    pub fn to_set(&self) -> Result<MaskSet> {
        let masks = self
            .instances
            .iter()
            .map(|r| InstanceMask::from_runs(self.height, self.width, &r.runs))
            .collect::<Result<Vec<_>>>()?;
        MaskSet::new(self.height, self.width, masks)
    }

    pub fn scores(&self) -> Vec<Option<f64>> {
        self.instances.iter().map(|r| r.score).collect()
    }
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

pub fn write_mask_file(path: impl AsRef<Path>, set: &MaskSet, scores: Option<&[f64]>) -> Result<()> {
    if let Some(s) = scores {
        if s.len() != set.len() {
            return Err(Error::Shape(format!("{} scores for {} masks", s.len(), set.len())));
        }
    }
    write_json(&MaskFile::from_set(set, scores), path.as_ref())
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<MaskFile> {
    read_json(path.as_ref())
}

/// Reads a mask sidecar and decodes every instance.
pub fn read_mask_set(path: impl AsRef<Path>) -> Result<MaskSet> {
    let path = path.as_ref();
    read_mask_file(path)?.to_set().map_err(|e| e.in_file(path))
}

/// A per-pixel class-label raster. Label 0 is background / no change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelRaster {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("raster dimensions must be >= 1, got {height}x{width}")));
        }
        Ok(Self { height, width, labels: vec![0; height * width] })
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{} labels given for a {height}x{width} raster",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Writes `label` onto every foreground pixel of `mask`.
    pub fn paint(&mut self, mask: &InstanceMask, label: u32) -> Result<()> {
        if mask.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "mask {}x{} painted onto {}x{} raster",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        for (y, x) in mask.foreground() {
            self.labels[y * self.width + x] = label;
        }
        Ok(())
    }

    /// Pixels carrying a non-zero label.
    pub fn support(&self) -> InstanceMask {
        let pixels: Vec<bool> = self.labels.iter().map(|&l| l != 0).collect();
        InstanceMask::from_pixels(self.height, self.width, &pixels).expect("dims valid")
    }

    pub fn class_mask(&self, label: u32) -> InstanceMask {
        let pixels: Vec<bool> = self.labels.iter().map(|&l| l == label).collect();
        InstanceMask::from_pixels(self.height, self.width, &pixels).expect("dims valid")
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn to_file(&self) -> LabelFile {
        let mut present: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        present.sort_unstable();
        present.dedup();
        let classes = present
            .into_iter()
            .map(|label| LabelRecord {
                label,
                runs: encode_runs(self.labels.iter().map(|&l| l == label)),
            })
            .collect();
        LabelFile { height: self.height, width: self.width, classes }
    }
}

/// On-disk label raster: one RLE run list per non-zero label,
/// `{"height": H, "width": W, "classes": [{"label": 1, "runs": [...]}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<LabelRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label: u32,
    pub runs: Vec<u64>,
}

impl LabelFile {
    pub fn to_raster(&self) -> Result<LabelRaster> {
        let mut raster = LabelRaster::zeros(self.height, self.width)?;
        for rec in &self.classes {
            if rec.label == 0 {
                return Err(Error::format("classes", "label 0 is implicit and may not be listed"));
            }
            let pixels = decode_runs(&rec.runs, self.height * self.width)?;
            for (i, _) in pixels.iter().enumerate().filter(|(_, p)| **p) {
                if raster.labels[i] != 0 {
                    return Err(Error::format(
                        "classes",
                        format!("labels {} and {} overlap at pixel {i}", raster.labels[i], rec.label),
                    ));
                }
                raster.labels[i] = rec.label;
            }
        }
        Ok(raster)
    }
}

pub fn write_label_raster(path: impl AsRef<Path>, raster: &LabelRaster) -> Result<()> {
    write_json(&raster.to_file(), path.as_ref())
}

pub fn read_label_raster(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    read_json::<LabelFile>(path)?.to_raster().map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_examples() {
        assert_eq!(encode_runs([false; 4]), vec![4]);
        assert_eq!(encode_runs([true; 4]), vec![0, 4]);
        assert_eq!(encode_runs([false, true, true, false]), vec![1, 2, 1]);
        assert_eq!(decode_runs(&[1, 2, 1], 4).unwrap(), vec![false, true, true, false]);
    }

    #[test]
    fn rle_sum_mismatch_is_format_error() {
        let err = decode_runs(&[1, 2], 4).unwrap_err();
        assert!(matches!(err, Error::Format { field: "runs", .. }));
        assert!(InstanceMask::from_runs(2, 2, &[5]).is_err());
    }

    #[test]
    fn mask_area_and_iou() {
        // A: 3x4 block (12 px); B: 3x3 inside A's columns 1..4 plus one extra row -> |B| = 10
        let a = InstanceMask::rect(8, 8, 0, 0, 3, 4).unwrap();
        let mut b = InstanceMask::rect(8, 8, 0, 1, 3, 4).unwrap();
        b.set(3, 1, true);
        assert_eq!(a.area(), 12);
        assert_eq!(b.area(), 10);
        assert_eq!(a.intersection_area(&b).unwrap(), 9);
        assert_eq!(a.union_area(&b).unwrap(), 13);
        assert!((a.iou(&b).unwrap() - 9.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn foreground_iterates_set_bits() {
        let m = InstanceMask::from_fn(9, 11, |y, x| (y * 7 + x * 3) % 5 == 0).unwrap();
        let listed: Vec<_> = m.foreground().collect();
        let brute: Vec<_> = (0..9)
            .flat_map(|y| (0..11).map(move |x| (y, x)))
            .filter(|&(y, x)| (y * 7 + x * 3) % 5 == 0)
            .collect();
        assert_eq!(listed, brute);
        assert_eq!(m.area(), brute.len());
    }

    #[test]
    fn mask_set_rejects_mixed_dims() {
        let a = InstanceMask::empty(4, 4).unwrap();
        let b = InstanceMask::empty(4, 5).unwrap();
        assert!(MaskSet::new(4, 4, vec![a, b]).is_err());
    }

    #[test]
    fn label_file_rejects_overlap() {
        let file = LabelFile {
            height: 1,
            width: 2,
            classes: vec![
                LabelRecord { label: 1, runs: vec![0, 2] },
                LabelRecord { label: 2, runs: vec![1, 1] },
            ],
        };
        assert!(file.to_raster().is_err());
    }

    #[test]
    fn sidecars_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let set = MaskSet::new(
            3,
            3,
            vec![
                InstanceMask::rect(3, 3, 0, 0, 2, 2).unwrap(),
                InstanceMask::rect(3, 3, 1, 1, 3, 3).unwrap(),
            ],
        )
        .unwrap();
        let path = dir.path().join("m.json");
        write_mask_file(&path, &set, Some(&[0.5, -0.25])).unwrap();
        let file = read_mask_file(&path).unwrap();
        assert_eq!(file.to_set().unwrap(), set);
        assert_eq!(file.scores(), vec![Some(0.5), Some(-0.25)]);

        let mut raster = LabelRaster::zeros(3, 3).unwrap();
        raster.paint(&set.masks()[0], 2).unwrap();
        raster.paint(&set.masks()[1], 1).unwrap();
        let rpath = dir.path().join("r.json");
        write_label_raster(&rpath, &raster).unwrap();
        assert_eq!(read_label_raster(&rpath).unwrap(), raster);
    }

    #[test]
    fn mask_json_layout() {
        let set = MaskSet::new(1, 4, vec![InstanceMask::from_pixels(1, 4, &[false, true, true, false]).unwrap()]).unwrap();
        let json = serde_json::to_value(MaskFile::from_set(&set, None)).unwrap();
        assert_eq!(json, serde_json::json!({"height": 1, "width": 4, "instances": [{"runs": [1, 2, 1]}]}));
    }
}

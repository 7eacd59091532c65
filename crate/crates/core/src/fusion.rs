//! Mask arithmetic for weakly supervised localization: CAM binarization,
//! proposal-guided pseudo-label refinement, and inference-time filtering of
//! proposals against a predicted change region.
//!
//! All ratios use strict comparisons: a proposal whose overlap ratio equals
//! the threshold is rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{axis_taps, FeatureMap};
use crate::mask::{InstanceMask, MaskSet};
use crate::proposal::ChangeProposal;

/// Binary pseudo label at image resolution.
pub type PseudoLabel = InstanceMask;
/// Binary change region predicted by a weakly supervised localizer.
pub type ChangeRegion = InstanceMask;

/// Class activation map at feature resolution, plus the image size it is
/// upsampled to. Stored on disk as a single-channel `OVFT` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    map: FeatureMap,
    image_height: usize,
    image_width: usize,
}

impl CamMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, image_height: usize, image_width: usize) -> Result<Self> {
        Self::from_feature_map(FeatureMap::new(height, width, 1, values)?, image_height, image_width)
    }

    pub fn from_feature_map(map: FeatureMap, image_height: usize, image_width: usize) -> Result<Self> {
        if map.dim() != 1 {
            return Err(Error::Shape(format!("CAM must have one channel, got {}", map.dim())));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::Shape(format!("image size {image_height}x{image_width} is empty")));
        }
        Ok(Self { map, image_height, image_width })
    }

    pub fn as_feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { beta: 0.5, gamma1: 0.05, gamma2: 0.05 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Upsamples the CAM to image size, min-max normalizes it, and marks pixels
/// with normalized activation `>= beta`. A constant CAM gives an empty label.
pub fn binarize_cam(cam: &CamMap, beta: f64) -> Result<PseudoLabel> {
    let src = &cam.map;
    let (image_h, image_w) = cam.image_dims();
    let ys = axis_taps(src.height(), image_h);
    let xs = axis_taps(src.width(), image_w);
    let v = |y: usize, x: usize| src.at(y, x)[0] as f64;
    let mut values = Vec::with_capacity(image_h * image_w);
    for ty in &ys {
        for tx in &xs {
            let top = (1.0 - tx.frac) * v(ty.lo, tx.lo) + tx.frac * v(ty.lo, tx.hi);
            let bottom = (1.0 - tx.frac) * v(ty.hi, tx.lo) + tx.frac * v(ty.hi, tx.hi);
            values.push((1.0 - ty.frac) * top + ty.frac * bottom);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return InstanceMask::empty(image_h, image_w);
    }
    let pixels: Vec<bool> = values.iter().map(|&x| (x - lo) / (hi - lo) >= beta).collect();
    InstanceMask::from_pixels(image_h, image_w, &pixels)
}

/// `|m ∩ y| / |m|`.
pub fn overlap_ratio(m: &InstanceMask, y: &InstanceMask) -> Result<f64> {
    let area = m.area();
    if area == 0 {
        return Err(Error::EmptyRegion("overlap ratio of an empty mask".into()));
    }
    Ok(m.intersection_area(y)? as f64 / area as f64)
}

/// Union of the proposals whose overlap ratio with `coarse` exceeds `gamma1`.
/// The coarse label itself contributes no pixels. Empty proposals are skipped.
pub fn refine_pseudo_label(coarse: &PseudoLabel, proposals: &MaskSet, gamma1: f64) -> Result<PseudoLabel> {
    if coarse.dims() != proposals.dims() {
        return Err(Error::Shape(format!(
            "pseudo label is {}x{}, proposals are {}x{}",
            coarse.height(),
            coarse.width(),
            proposals.height(),
            proposals.width()
        )));
    }
    let mut out = InstanceMask::empty(coarse.height(), coarse.width())?;
    for m in proposals.masks().iter().filter(|m| !m.is_empty()) {
        if overlap_ratio(m, coarse)? > gamma1 {
            out.union_with(m)?;
        }
    }
    Ok(out)
}

/// Keeps proposals whose overlap ratio with `region` exceeds `gamma2`, in
/// their original order.
pub fn fuse_inference(proposals: &[ChangeProposal], region: &ChangeRegion, gamma2: f64) -> Result<Vec<ChangeProposal>> {
    let mut kept = Vec::new();
    for p in proposals {
        if p.mask.is_empty() {
            continue;
        }
        if overlap_ratio(&p.mask, region)? > gamma2 {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}

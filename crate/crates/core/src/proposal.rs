//! Class-agnostic change proposals from bi-temporal mask sets.
//!
//! Masks from both epochs are pooled, deduplicated by greedy mask-IoU NMS
//! (larger masks first), then scored by the negative cosine similarity of the
//! two epochs' pooled features inside each mask.

use serde::{Deserialize, Serialize};

use crate::dataset::PairEntry;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::mask::{InstanceMask, MaskSet};
use crate::prototype::masked_pool;
use crate::retrieval::cosine_sim;

/// Which epoch's mask generator produced a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epoch {
    T1,
    T2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// A mask is suppressed when its IoU with an already kept mask exceeds this.
    pub nms_iou_threshold: f64,
    /// Proposals need `change_score > alpha`. Values below -1 keep everything.
    pub alpha: f64,
    /// Deduplicated masks smaller than this many pixels are dropped.
    pub min_area: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { nms_iou_threshold: 0.8, alpha: 0.0, min_area: 32 }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold <= 1.0) {
            return Err(Error::config("nms_iou_threshold", format!("{} is outside (0, 1]", self.nms_iou_threshold)));
        }
        if !self.alpha.is_finite() || self.alpha > 1.0 {
            return Err(Error::config("alpha", format!("{} must be finite and <= 1", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeProposal {
    pub mask: InstanceMask,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// `-cos(z1, z2)`.
    pub change_score: f64,
    pub source: Epoch,
}

/// A mask that survived deduplication, with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct KeptMask {
    pub mask: InstanceMask,
    pub source: Epoch,
    pub index: usize,
}

/// Greedy NMS over `m1 ∪ m2`.
///
/// Candidates are visited by area descending, then t1 before t2, then original
/// index. A candidate is dropped when its IoU with any kept mask exceeds
/// `config.nms_iou_threshold`. The result is in keep order.
pub fn dedup_masks(m1: &MaskSet, m2: &MaskSet, config: &ProposalConfig) -> Result<Vec<KeptMask>> {
    if m1.dims() != m2.dims() {
        return Err(Error::Shape(format!(
            "t1 masks are {}x{}, t2 masks are {}x{}",
            m1.height(),
            m1.width(),
            m2.height(),
            m2.width()
        )));
    }
    let mut candidates: Vec<(usize, Epoch, usize, &InstanceMask)> = m1
        .masks()
        .iter()
        .enumerate()
        .map(|(i, m)| (m.area(), Epoch::T1, i, m))
        .chain(m2.masks().iter().enumerate().map(|(i, m)| (m.area(), Epoch::T2, i, m)))
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut kept: Vec<KeptMask> = Vec::new();
    for (area, source, index, mask) in candidates {
        let mut suppressed = false;
        for k in &kept {
            let inter = mask.intersection_area(&k.mask)?;
            let union = area + k.mask.area() - inter;
            if union > 0 && inter as f64 / union as f64 > config.nms_iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(KeptMask { mask: mask.clone(), source, index });
        }
    }
    Ok(kept)
}

/// Pools both epochs inside `mask` and returns `(z1, z2, -cos(z1, z2))`.
pub fn score_change(
    features_t1: &FeatureMap,
    features_t2: &FeatureMap,
    mask: &InstanceMask,
    image_h: usize,
    image_w: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let z1 = masked_pool(features_t1, mask, image_h, image_w)?;
    let z2 = masked_pool(features_t2, mask, image_h, image_w)?;
    let score = -cosine_sim(&z1, &z2)?;
    Ok((z1, z2, score))
}

/// Runs the proposal stage on in-memory data. Output is sorted by change score,
/// highest first; equal scores keep NMS order.
pub fn propose_from(
    features_t1: &FeatureMap,
    features_t2: &FeatureMap,
    m1: &MaskSet,
    m2: &MaskSet,
    config: &ProposalConfig,
) -> Result<Vec<ChangeProposal>> {
    config.validate()?;
    if features_t1.dim() != features_t2.dim() {
        return Err(Error::Shape(format!(
            "feature dims differ between epochs: {} vs {}",
            features_t1.dim(),
            features_t2.dim()
        )));
    }
    let (h, w) = m1.dims();
    let mut out = Vec::new();
    for kept in dedup_masks(m1, m2, config)? {
        if kept.mask.area() < config.min_area.max(1) {
            continue;
        }
        let (z1, z2, change_score) = score_change(features_t1, features_t2, &kept.mask, h, w)?;
        if change_score > config.alpha {
            out.push(ChangeProposal { mask: kept.mask, z1, z2, change_score, source: kept.source });
        }
    }
    out.sort_by(|a, b| b.change_score.total_cmp(&a.change_score));
    Ok(out)
}

/// Re-derives region features and change scores for masks that were
/// proposed earlier, keeping their order. No deduplication or thresholding is
/// applied. The source epoch is not recorded on disk, so every proposal is
/// marked `T1`.
pub fn rescore(features_t1: &FeatureMap, features_t2: &FeatureMap, masks: &MaskSet) -> Result<Vec<ChangeProposal>> {
    let (h, w) = masks.dims();
    masks
        .masks()
        .iter()
        .map(|m| {
            let (z1, z2, change_score) = score_change(features_t1, features_t2, m, h, w)?;
            Ok(ChangeProposal { mask: m.clone(), z1, z2, change_score, source: Epoch::T1 })
        })
        .collect()
}

/// Loads one manifest pair and runs the proposal stage on it.
pub fn propose_changes(pair: &PairEntry, config: &ProposalConfig) -> Result<Vec<ChangeProposal>> {
    let run = || {
        let (f1, f2) = pair.load_features()?;
        let (m1, m2) = pair.load_masks()?;
        propose_from(&f1, &f2, &m1, &m2, config)
    };
    run().map_err(|e| e.in_pair(&pair.id))
}

//! Confusion-based change-detection metrics and the two oracle diagnostics.
//!
//! Confusion counts are summed over every pair before any division, so the
//! reported IoU and F1 for a class always come from the same TP/FP/FN and
//! satisfy `F1 = 2·IoU / (1 + IoU)`. Classes that never occur in either the
//! prediction or the ground truth score 0 and still count toward the means.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::CategoryVocabulary;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::mask::{InstanceMask, LabelRaster, MaskSet};
use crate::proposal::{score_change, ChangeProposal, Epoch};
use crate::prototype::PrototypeSet;
use crate::retrieval::{assign_categories, rasterize, RetrievalConfig, SemanticChangeMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 { 0.0 } else { 100.0 * self.tp as f64 / d as f64 }
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 { 0.0 } else { 100.0 * 2.0 * self.tp as f64 / d as f64 }
    }

    fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// F1 implied by an IoU over the same confusion counts (both in percent).
pub fn f1_from_iou(iou: f64) -> f64 {
    200.0 * iou / (100.0 + iou)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Standard,
    OracleIdentification,
    OracleChangeProposal,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Standard => "standard",
            EvalMode::OracleIdentification => "oracle identification",
            EvalMode::OracleChangeProposal => "oracle change proposal",
        })
    }
}

/// Which temporal rasters of a semantic prediction enter the per-class
/// confusion. `Both` scores "from" against the first-date truth and "to"
/// against the second-date truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredRasters {
    #[default]
    Both,
    T1,
    T2,
}

/// Per-class and binary confusion counts. Accumulators merge associatively,
/// so pairs can be evaluated independently and reduced in any order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: Vec<Counts>,
    binary: Counts,
    binary_seen: bool,
    semantic_seen: bool,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self { classes: vec![Counts::default(); n_classes], binary: Counts::default(), binary_seen: false, semantic_seen: false }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self, class: u32) -> Option<&Counts> {
        (class >= 1).then(|| self.classes.get(class as usize - 1)).flatten()
    }

    pub fn binary_counts(&self) -> &Counts {
        &self.binary
    }

    /// Adds one binary change prediction against its ground truth.
    pub fn add_binary(&mut self, pred: &InstanceMask, gt: &InstanceMask) -> Result<()> {
        let tp = pred.intersection_area(gt)? as u64;
        self.binary.tp += tp;
        self.binary.fp += pred.area() as u64 - tp;
        self.binary.fn_ += gt.area() as u64 - tp;
        self.binary_seen = true;
        Ok(())
    }

    /// Adds one label raster against its ground truth. Label 0 is background.
    pub fn add_labels(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let n = self.classes.len();
        for &l in pred.labels().iter().chain(gt.labels()) {
            if l as usize > n {
                return Err(Error::UnknownLabel { label: l, n_classes: n });
            }
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if p == g {
                if p != 0 {
                    self.classes[p as usize - 1].tp += 1;
                }
                continue;
            }
            if p != 0 {
                self.classes[p as usize - 1].fp += 1;
            }
            if g != 0 {
                self.classes[g as usize - 1].fn_ += 1;
            }
        }
        self.semantic_seen = true;
        Ok(())
    }

    /// Scores both epochs of a semantic change prediction against their
    /// respective ground-truth rasters.
    pub fn add_semantic(&mut self, pred: &SemanticChangeMap, gt_t1: &LabelRaster, gt_t2: &LabelRaster) -> Result<()> {
        self.add_semantic_rasters(pred, gt_t1, gt_t2, ScoredRasters::Both)
    }

    pub fn add_semantic_rasters(
        &mut self,
        pred: &SemanticChangeMap,
        gt_t1: &LabelRaster,
        gt_t2: &LabelRaster,
        rasters: ScoredRasters,
    ) -> Result<()> {
        if rasters != ScoredRasters::T2 {
            self.add_labels(&pred.t1, gt_t1)?;
        }
        if rasters != ScoredRasters::T1 {
            self.add_labels(&pred.t2, gt_t2)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.classes.len() != self.classes.len() {
            return Err(Error::Shape(format!(
                "merging accumulators over {} and {} classes",
                self.classes.len(),
                other.classes.len()
            )));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        self.binary.merge(&other.binary);
        self.binary_seen |= other.binary_seen;
        self.semantic_seen |= other.semantic_seen;
        Ok(())
    }

    pub fn finalize(&self, vocabulary: &CategoryVocabulary, mode: EvalMode) -> Result<EvalReport> {
        if vocabulary.len() != self.classes.len() {
            return Err(Error::Shape(format!(
                "vocabulary has {} classes, accumulator {}",
                vocabulary.len(),
                self.classes.len()
            )));
        }
        let classes: Vec<ClassScore> = self
            .classes
            .iter()
            .zip(vocabulary.indices())
            .map(|(c, i)| ClassScore {
                index: i,
                name: vocabulary.name(i).unwrap().to_string(),
                iou: c.iou(),
                f1: c.f1(),
                counts: *c,
            })
            .collect();
        let (miou, mf1) = if self.semantic_seen && !classes.is_empty() {
            let n = classes.len() as f64;
            (
                Some(classes.iter().map(|c| c.iou).sum::<f64>() / n),
                Some(classes.iter().map(|c| c.f1).sum::<f64>() / n),
            )
        } else {
            (None, None)
        };
        Ok(EvalReport {
            mode,
            binary: self.binary_seen.then(|| BinaryScore { iou: self.binary.iou(), f1: self.binary.f1(), counts: self.binary }),
            classes: if self.semantic_seen { classes } else { Vec::new() },
            miou,
            mf1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScore {
    pub iou: f64,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub index: u32,
    pub name: String,
    pub iou: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// Metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryScore>,
    pub classes: Vec<ClassScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mf1: Option<f64>,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text table: one row per class with IoU and F1, then the averages.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).chain([7, 13]).max().unwrap_or(13);
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        if let Some(b) = &self.binary {
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", "", "IoU", "F1");
            let _ = writeln!(out, "{:<width$}  {:>6.2}  {:>6.2}", "binary change", b.iou, b.f1);
        }
        if !self.classes.is_empty() {
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", "class", "IoU", "F1");
            for c in &self.classes {
                let _ = writeln!(out, "{:<width$}  {:>6.2}  {:>6.2}", c.name, c.iou, c.f1);
            }
        }
        if let (Some(m), Some(f)) = (self.miou, self.mf1) {
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", "", "mIoU", "mF1");
            let _ = writeln!(out, "{:<width$}  {:>6.2}  {:>6.2}", "Average", m, f);
        }
        out
    }
}

/// Scores a single semantic prediction (both epochs) in isolation.
pub fn multiclass_metrics(
    pred: &SemanticChangeMap,
    gt_t1: &LabelRaster,
    gt_t2: &LabelRaster,
    vocabulary: &CategoryVocabulary,
) -> Result<EvalReport> {
    let mut acc = ConfusionAccumulator::new(vocabulary.len());
    acc.add_semantic(pred, gt_t1, gt_t2)?;
    acc.finalize(vocabulary, EvalMode::Standard)
}

fn majority(mask: &InstanceMask, raster: &LabelRaster) -> (u32, Option<u32>) {
    let mut counts = vec![0usize; raster.max_label() as usize + 1];
    for (y, x) in mask.foreground() {
        counts[raster.get(y, x) as usize] += 1;
    }
    let argmax = |range: std::ops::Range<usize>| {
        let mut best: Option<(usize, usize)> = None;
        for l in range {
            if counts[l] > 0 && best.is_none_or(|(_, c)| counts[l] > c) {
                best = Some((l, counts[l]));
            }
        }
        best.map(|(l, _)| l as u32)
    };
    (argmax(0..counts.len()).unwrap_or(0), argmax(1..counts.len()))
}

/// Labels each mask by majority vote over the ground-truth rasters.
///
/// Each epoch takes the label with the largest pixel overlap inside the mask
/// (ties to the lower label). Masks that are mostly background in both epochs
/// are dropped. When only one epoch is mostly background, that epoch takes its
/// most frequent foreground label instead, so both output rasters keep the
/// same support; a mask with no foreground pixels at all in that epoch is
/// dropped. Earlier masks win on overlap.
pub fn oracle_identification(masks: &MaskSet, gt_t1: &LabelRaster, gt_t2: &LabelRaster) -> Result<SemanticChangeMap> {
    if gt_t1.dims() != masks.dims() || gt_t2.dims() != masks.dims() {
        return Err(Error::Shape("ground-truth rasters and masks differ in size".into()));
    }
    let (h, w) = masks.dims();
    let mut map = SemanticChangeMap::empty(h, w)?;
    for mask in masks.masks().iter().rev() {
        let (m1, fg1) = majority(mask, gt_t1);
        let (m2, fg2) = majority(mask, gt_t2);
        let labels = match (m1, m2) {
            (0, 0) => None,
            (0, c2) => fg1.map(|c1| (c1, c2)),
            (c1, 0) => fg2.map(|c2| (c1, c2)),
            (c1, c2) => Some((c1, c2)),
        };
        if let Some((c1, c2)) = labels {
            map.t1.paint(mask, c1)?;
            map.t2.paint(mask, c2)?;
        }
    }
    Ok(map)
}

/// Uses ground-truth change masks as proposals and identifies them by
/// retrieval, isolating identification error from localization error.
pub fn oracle_change_proposal(
    gt_change: &MaskSet,
    features_t1: &FeatureMap,
    features_t2: &FeatureMap,
    bank: &PrototypeSet,
    config: &RetrievalConfig,
) -> Result<SemanticChangeMap> {
    let (h, w) = gt_change.dims();
    let mut proposals = Vec::with_capacity(gt_change.len());
    for mask in gt_change.masks().iter().filter(|m| !m.is_empty()) {
        let (z1, z2, change_score) = score_change(features_t1, features_t2, mask, h, w)?;
        proposals.push(ChangeProposal { mask: mask.clone(), z1, z2, change_score, source: Epoch::T1 });
    }
    let assignments = assign_categories(&proposals, bank, config)?;
    rasterize(&assignments, &proposals, h, w)
}

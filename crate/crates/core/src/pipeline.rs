//! End-to-end batch run over a dataset manifest.
//!
//! Pairs are processed in parallel on a bounded thread pool and results are
//! reduced in manifest order, so outputs do not depend on the thread count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryVocabulary, DatasetManifest, PairEntry};
use crate::error::{Error, Result};
use crate::eval::{oracle_change_proposal, oracle_identification, ConfusionAccumulator, EvalMode, EvalReport, ScoredRasters};
use crate::fusion::{fuse_inference, FusionConfig};
use crate::mask::{read_json, write_json, write_mask_file, LabelFile, LabelRecord, MaskSet};
use crate::proposal::{propose_from, ChangeProposal, ProposalConfig};
use crate::prototype::{load_prototypes, PrototypeSet};
use crate::retrieval::{assign_categories, rasterize, RetrievalConfig, SemanticChangeMap};

/// On-disk semantic change map:
/// `{"height": H, "width": W, "t1": [{"label", "runs"}], "t2": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticFile {
    pub height: usize,
    pub width: usize,
    pub t1: Vec<LabelRecord>,
    pub t2: Vec<LabelRecord>,
}

pub fn write_semantic_map(path: impl AsRef<Path>, map: &SemanticChangeMap) -> Result<()> {
    let (height, width) = map.dims();
    let file = SemanticFile { height, width, t1: map.t1.to_file().classes, t2: map.t2.to_file().classes };
    write_json(&file, path.as_ref())
}

pub fn read_semantic_map(path: impl AsRef<Path>) -> Result<SemanticChangeMap> {
    let path = path.as_ref();
    let f: SemanticFile = read_json(path)?;
    let raster = |classes: Vec<LabelRecord>| LabelFile { height: f.height, width: f.width, classes }.to_raster();
    let map = || Ok(SemanticChangeMap { t1: raster(f.t1.clone())?, t2: raster(f.t2.clone())? });
    map().map_err(|e: Error| e.in_file(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Recorded in `run.json`. Every pipeline stage is deterministic, so the
    /// seed only matters to the stages that build inputs (synth, prototypes).
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    pub mode: EvalMode,
    /// Temporal rasters scored per class.
    pub rasters: ScoredRasters,
    /// Filter proposals by each pair's change-region sidecar.
    pub fuse: bool,
    pub proposal: ProposalConfig,
    pub retrieval: RetrievalConfig,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            prototypes: None,
            output_dir: None,
            seed: 0,
            jobs: 0,
            mode: EvalMode::Standard,
            rasters: ScoredRasters::Both,
            fuse: false,
            proposal: ProposalConfig::default(),
            retrieval: RetrievalConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

pub const ENV_MANIFEST: &str = "OVCD_MANIFEST";
pub const ENV_PROTOTYPES: &str = "OVCD_PROTOTYPES";
pub const ENV_OUTPUT_DIR: &str = "OVCD_OUTPUT_DIR";

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a TOML config. Relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.prototypes, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies `OVCD_MANIFEST`, `OVCD_PROTOTYPES` and `OVCD_OUTPUT_DIR`.
    pub fn apply_env(&mut self) {
        self.apply_overrides(|k| std::env::var_os(k).map(PathBuf::from));
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<PathBuf>) {
        for (key, slot) in [
            (ENV_MANIFEST, &mut self.manifest),
            (ENV_PROTOTYPES, &mut self.prototypes),
            (ENV_OUTPUT_DIR, &mut self.output_dir),
        ] {
            if let Some(v) = lookup(key) {
                *slot = Some(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("manifest", &self.manifest), ("prototypes", &self.prototypes), ("output_dir", &self.output_dir)] {
            if v.is_none() {
                return Err(Error::config(name, "is required"));
            }
        }
        for (name, p) in [("manifest", &self.manifest), ("prototypes", &self.prototypes)] {
            let p = p.as_ref().unwrap();
            if !p.is_file() {
                return Err(Error::config(name, format!("{} does not exist", p.display())));
            }
        }
        self.proposal.validate()?;
        self.fusion.validate()
    }
}

/// Result of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSummary {
    pub report: EvalReport,
    pub n_pairs: usize,
    pub n_proposals: usize,
}

/// Vocabulary for evaluation: the manifest's classes when listed, otherwise
/// the bank's. Listed classes must match the bank exactly.
pub fn resolve_vocabulary(manifest: &DatasetManifest, bank: &PrototypeSet) -> Result<CategoryVocabulary> {
    let bank_names: Vec<&str> = bank.classes().iter().map(|c| c.name.as_str()).collect();
    if manifest.classes.is_empty() {
        return CategoryVocabulary::new(bank_names);
    }
    let vocab = manifest.vocabulary()?;
    let listed: Vec<&str> = vocab.names().iter().map(String::as_str).collect();
    if listed != bank_names {
        return Err(Error::config(
            "prototypes",
            format!("bank classes {bank_names:?} do not match manifest classes {listed:?}"),
        ));
    }
    Ok(vocab)
}

struct PairResult {
    acc: ConfusionAccumulator,
    n_proposals: usize,
}

fn require<T>(value: Option<T>, field: &str, mode: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(field, format!("{mode} needs this file for every pair")))
}

fn process_pair(
    pair: &PairEntry,
    cfg: &PipelineConfig,
    bank: &PrototypeSet,
    n_classes: usize,
    out_dir: &Path,
) -> Result<PairResult> {
    let (f1, f2) = pair.load_features()?;
    let (m1, m2) = pair.load_masks()?;
    let (h, w) = m1.dims();
    let gt_change = pair.load_gt_change()?;
    let gt_semantic = pair.load_gt_semantic()?;

    let (proposals, map): (Vec<ChangeProposal>, SemanticChangeMap) = match cfg.mode {
        EvalMode::OracleChangeProposal => {
            let gt = require(gt_change.as_ref(), "gt_change_path", "oracle change proposal")?;
            let map = oracle_change_proposal(gt, &f1, &f2, bank, &cfg.retrieval)?;
            (Vec::new(), map)
        }
        mode => {
            let mut proposals = propose_from(&f1, &f2, &m1, &m2, &cfg.proposal)?;
            if cfg.fuse {
                let region = require(pair.load_change_region()?, "change_region_path", "fusion")?;
                proposals = fuse_inference(&proposals, &region, cfg.fusion.gamma2)?;
            }
            let map = if mode == EvalMode::OracleIdentification {
                let (g1, g2) = require(gt_semantic.as_ref(), "gt_semantic", "oracle identification")?;
                let masks = MaskSet::new(h, w, proposals.iter().map(|p| p.mask.clone()).collect())?;
                oracle_identification(&masks, g1, g2)?
            } else {
                let assignments = assign_categories(&proposals, bank, &cfg.retrieval)?;
                rasterize(&assignments, &proposals, h, w)?
            };
            (proposals, map)
        }
    };

    let masks = MaskSet::new(h, w, proposals.iter().map(|p| p.mask.clone()).collect())?;
    let scores: Vec<f64> = proposals.iter().map(|p| p.change_score).collect();
    write_mask_file(out_dir.join(format!("{}.proposals.json", pair.id)), &masks, Some(&scores))?;
    write_semantic_map(out_dir.join(format!("{}.semantic.json", pair.id)), &map)?;

    let mut acc = ConfusionAccumulator::new(n_classes);
    if let Some((g1, g2)) = &gt_semantic {
        acc.add_semantic_rasters(&map, g1, g2, cfg.rasters)?;
    }
    let gt_binary = match (&gt_change, &gt_semantic) {
        (Some(gt), _) => Some(gt.union()),
        (None, Some((g1, _))) => Some(g1.support()),
        (None, None) => None,
    };
    if let Some(gt) = gt_binary {
        acc.add_binary(&map.t1.support(), &gt)?;
    }
    Ok(PairResult { acc, n_proposals: proposals.len() })
}

/// Runs proposals, retrieval, optional fusion and evaluation over every pair
/// and writes `pairs/<id>.proposals.json`, `pairs/<id>.semantic.json`,
/// `report.json`, `report.txt` and the resolved `run.json` under the output
/// directory.
pub fn run_pipeline(cfg: &PipelineConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<PipelineSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(cfg.manifest.as_ref().unwrap())?;
    let bank = load_prototypes(cfg.prototypes.as_ref().unwrap(), None)?;
    let vocab = resolve_vocabulary(&manifest, &bank)?;
    let out_dir = cfg.output_dir.clone().unwrap();
    let pair_dir = out_dir.join("pairs");
    std::fs::create_dir_all(&pair_dir).map_err(|e| Error::io(&pair_dir, e))?;

    write_json(cfg, &out_dir.join("run.json"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let total = manifest.pairs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<PairResult> = pool.install(|| {
        manifest
            .pairs
            .par_iter()
            .map(|pair| {
                let start = std::time::Instant::now();
                let r = process_pair(pair, cfg, &bank, vocab.len(), &pair_dir).map_err(|e| e.in_pair(&pair.id))?;
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                progress(&format!(
                    "[{n}/{total}] {}: {} proposals in {:.1} ms",
                    pair.id,
                    r.n_proposals,
                    start.elapsed().as_secs_f64() * 1e3
                ));
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut acc = ConfusionAccumulator::new(vocab.len());
    let mut n_proposals = 0;
    for r in &results {
        acc.merge(&r.acc)?;
        n_proposals += r.n_proposals;
    }
    let report = acc.finalize(&vocab, cfg.mode)?;
    write_json(&report, &out_dir.join("report.json"))?;
    let table = out_dir.join("report.txt");
    std::fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    Ok(PipelineSummary { report, n_pairs: total, n_proposals })
}

/// One point of an alpha sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub n_proposals: usize,
    pub report: EvalReport,
}

/// Evaluates the standard pipeline at every threshold in `alphas`.
///
/// Proposals are generated and identified once with every deduplicated mask
/// kept, then filtered by change score for each alpha. Scoring, fusion and
/// retrieval act on each proposal independently, so every point equals a full
/// run at that alpha. `cfg.proposal.alpha`, `cfg.mode` and `cfg.output_dir`
/// are ignored.
pub fn sweep_alpha(cfg: &PipelineConfig, alphas: &[f64]) -> Result<Vec<AlphaPoint>> {
    let manifest_path = cfg.manifest.as_ref().ok_or_else(|| Error::config("manifest", "is required"))?;
    let bank_path = cfg.prototypes.as_ref().ok_or_else(|| Error::config("prototypes", "is required"))?;
    if alphas.is_empty() {
        return Err(Error::config("alphas", "no thresholds to sweep"));
    }
    for &alpha in alphas {
        ProposalConfig { alpha, ..cfg.proposal }.validate()?;
    }
    cfg.fusion.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let bank = load_prototypes(bank_path, None)?;
    let vocab = resolve_vocabulary(&manifest, &bank)?;
    // below every possible score, so nothing is thresholded away
    let keep_all = ProposalConfig { alpha: -2.0, ..cfg.proposal };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let per_pair: Vec<Vec<(ConfusionAccumulator, usize)>> = pool.install(|| {
        manifest
            .pairs
            .par_iter()
            .map(|pair| {
                let run = || -> Result<Vec<(ConfusionAccumulator, usize)>> {
                    let (f1, f2) = pair.load_features()?;
                    let (m1, m2) = pair.load_masks()?;
                    let (h, w) = m1.dims();
                    let mut proposals = propose_from(&f1, &f2, &m1, &m2, &keep_all)?;
                    if cfg.fuse {
                        let region = require(pair.load_change_region()?, "change_region_path", "fusion")?;
                        proposals = fuse_inference(&proposals, &region, cfg.fusion.gamma2)?;
                    }
                    let assignments = assign_categories(&proposals, &bank, &cfg.retrieval)?;
                    let gt_change = pair.load_gt_change()?;
                    let gt_semantic = pair.load_gt_semantic()?;
                    let gt_binary = gt_change.map(|g| g.union()).or(gt_semantic.as_ref().map(|(g1, _)| g1.support()));
                    alphas
                        .iter()
                        .map(|&alpha| {
                            let kept: Vec<ChangeProposal> =
                                proposals.iter().filter(|p| p.change_score > alpha).cloned().collect();
                            // proposals are sorted by score, so the survivors are a prefix
                            let asg: Vec<_> =
                                assignments.iter().filter(|a| a.proposal_id < kept.len()).cloned().collect();
                            let map = rasterize(&asg, &kept, h, w)?;
                            let mut acc = ConfusionAccumulator::new(vocab.len());
                            if let Some((g1, g2)) = &gt_semantic {
                                acc.add_semantic_rasters(&map, g1, g2, cfg.rasters)?;
                            }
                            if let Some(gt) = &gt_binary {
                                acc.add_binary(&map.t1.support(), gt)?;
                            }
                            Ok((acc, kept.len()))
                        })
                        .collect()
                };
                run().map_err(|e| e.in_pair(&pair.id))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let mut acc = ConfusionAccumulator::new(vocab.len());
            let mut n_proposals = 0;
            for pair in &per_pair {
                acc.merge(&pair[i].0)?;
                n_proposals += pair[i].1;
            }
            Ok(AlphaPoint { alpha, n_proposals, report: acc.finalize(&vocab, EvalMode::Standard)? })
        })
        .collect()
}

/// The sweep point with the highest mIoU, or the highest binary IoU when no
/// semantic ground truth was scored. Ties go to the earlier point.
pub fn best_alpha(points: &[AlphaPoint]) -> Option<&AlphaPoint> {
    let key = |p: &AlphaPoint| p.report.miou.or(p.report.binary.as_ref().map(|b| b.iou)).unwrap_or(f64::NEG_INFINITY);
    points.iter().fold(None, |best: Option<&AlphaPoint>, p| match best {
        Some(b) if key(b) >= key(p) => Some(b),
        _ => Some(p),
    })
}

/// A finished sweep as written to `calibration.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub best_alpha: Option<f64>,
    pub points: Vec<AlphaPoint>,
}

impl Calibration {
    pub fn new(points: Vec<AlphaPoint>) -> Self {
        Self { best_alpha: best_alpha(&points).map(|p| p.alpha), points }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes") + "\n"
    }
}

/// Scores `<id>.semantic.json` files in `predictions` against each pair's
/// ground truth. Pairs without ground truth are skipped.
pub fn evaluate_predictions(
    manifest: &DatasetManifest,
    predictions: impl AsRef<Path>,
    rasters: ScoredRasters,
) -> Result<EvalReport> {
    let vocab = manifest.vocabulary()?;
    let dir = predictions.as_ref();
    let accs = manifest
        .pairs
        .par_iter()
        .map(|pair| {
            let run = || {
                let mut acc = ConfusionAccumulator::new(vocab.len());
                let gt_semantic = pair.load_gt_semantic()?;
                let gt_change = pair.load_gt_change()?;
                if gt_semantic.is_none() && gt_change.is_none() {
                    return Ok(acc);
                }
                let map = read_semantic_map(dir.join(format!("{}.semantic.json", pair.id)))?;
                if let Some((g1, g2)) = &gt_semantic {
                    acc.add_semantic_rasters(&map, g1, g2, rasters)?;
                }
                if let Some(gt) = gt_change.map(|g| g.union()).or(gt_semantic.map(|(g1, _)| g1.support())) {
                    acc.add_binary(&map.t1.support(), &gt)?;
                }
                Ok(acc)
            };
            run().map_err(|e: Error| e.in_pair(&pair.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionAccumulator::new(vocab.len());
    for a in &accs {
        total.merge(a)?;
    }
    total.finalize(&vocab, EvalMode::Standard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::LabelRaster;

    #[test]
    fn toml_sections_and_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "manifest = \"m.json\"\nmode = \"oracle_identification\"\n[proposal]\nalpha = -0.5\n[retrieval]\nstrategy = \"category_mean\"\n",
        )
        .unwrap();
        assert_eq!(cfg.proposal.alpha, -0.5);
        assert_eq!(cfg.proposal.nms_iou_threshold, 0.8);
        assert_eq!(cfg.mode, EvalMode::OracleIdentification);
        assert_eq!(cfg.fusion, FusionConfig::default());
        assert!(PipelineConfig::from_toml_str("bogus = 1").unwrap_err().is_config());
    }

    #[test]
    fn overrides_replace_paths() {
        let mut cfg = PipelineConfig { manifest: Some("a".into()), ..Default::default() };
        cfg.apply_overrides(|k| (k == ENV_MANIFEST).then(|| PathBuf::from("b")));
        assert_eq!(cfg.manifest, Some(PathBuf::from("b")));
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn semantic_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = SemanticChangeMap {
            t1: LabelRaster::from_labels(2, 2, vec![0, 1, 1, 2]).unwrap(),
            t2: LabelRaster::from_labels(2, 2, vec![0, 3, 3, 1]).unwrap(),
        };
        let p = dir.path().join("s.json");
        write_semantic_map(&p, &map).unwrap();
        assert_eq!(read_semantic_map(&p).unwrap(), map);
    }
}

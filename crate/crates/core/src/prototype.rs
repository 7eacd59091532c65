//! Region pooling and per-category prototype banks.
//!
//! Support features are pooled inside their localization masks (masked
//! average pooling over the bilinearly upsampled feature map), then each
//! category's pooled vectors are clustered with k-means. The resulting
//! centroids are the category's prototypes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryVocabulary, SupportManifest};
use crate::error::{Error, Result};
use crate::feature::{axis_taps, read_feature_map, write_feature_map, FeatureMap};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::mask::{read_json, read_mask_set, write_json, InstanceMask};

/// Mean feature vector over the foreground of `mask`, after upsampling
/// `features` bilinearly (corner-aligned) to `image_h × image_w`.
///
/// The upsampled map is never materialized: each foreground pixel adds its
/// four bilinear weights to a patch-resolution weight grid, and the result is
/// the weighted sum of patch features divided by the mask area.
pub fn masked_pool(features: &FeatureMap, mask: &InstanceMask, image_h: usize, image_w: usize) -> Result<Vec<f64>> {
    if mask.dims() != (image_h, image_w) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {image_h}x{image_w}",
            mask.height(),
            mask.width()
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyRegion("mask has no foreground pixels".into()));
    }
    let (fh, fw) = (features.height(), features.width());
    let ys = axis_taps(fh, image_h);
    let xs = axis_taps(fw, image_w);
    let mut weights = vec![0.0f64; fh * fw];
    for (y, x) in mask.foreground() {
        let (ty, tx) = (ys[y], xs[x]);
        weights[ty.lo * fw + tx.lo] += (1.0 - ty.frac) * (1.0 - tx.frac);
        weights[ty.lo * fw + tx.hi] += (1.0 - ty.frac) * tx.frac;
        weights[ty.hi * fw + tx.lo] += ty.frac * (1.0 - tx.frac);
        weights[ty.hi * fw + tx.hi] += ty.frac * tx.frac;
    }
    let mut out = vec![0.0f64; features.dim()];
    for (cell, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = features.at(cell / fw, cell % fw);
        for (o, &f) in out.iter_mut().zip(v) {
            *o += w * f as f64;
        }
    }
    let n = area as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// One support image: features at patch resolution plus a class-localization
/// mask at image resolution.
#[derive(Clone, Debug)]
pub struct SupportSample {
    pub category: u32,
    pub features: FeatureMap,
    pub mask: InstanceMask,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeature {
    pub vector: Vec<f64>,
    pub category: u32,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeBuildConfig {
    /// Centroids per class before clamping to the number of distinct pooled vectors.
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Descriptions per class used to synthesize support imagery (provenance only).
    pub n_descriptions: usize,
    /// Images synthesized per description (provenance only).
    pub images_per_description: usize,
}

impl Default for PrototypeBuildConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0, max_iters: 100, n_descriptions: 20, images_per_description: 5 }
    }
}

impl PrototypeBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub class_index: u32,
    pub name: String,
    pub centroids: Vec<Vec<f32>>,
    pub n_samples: usize,
}

/// Immutable bank of per-class centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    classes: Vec<ClassPrototypes>,
    build: PrototypeBuildConfig,
}

impl PrototypeSet {
    pub fn new(dim: usize, classes: Vec<ClassPrototypes>, build: PrototypeBuildConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("prototype dim must be >= 1".into()));
        }
        for c in &classes {
            if c.centroids.is_empty() {
                return Err(Error::Shape(format!("class {:?} has no centroids", c.name)));
            }
            if c.centroids.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Shape(format!("class {:?} has a malformed centroid", c.name)));
            }
        }
        Ok(Self { dim, classes, build })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassPrototypes] {
        &self.classes
    }

    pub fn build_config(&self) -> &PrototypeBuildConfig {
        &self.build
    }

    pub fn total_prototypes(&self) -> usize {
        self.classes.iter().map(|c| c.centroids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Pools every sample in parallel; output order follows input order.
pub fn pool_support(samples: &[SupportSample]) -> Result<Vec<RegionFeature>> {
    samples
        .par_iter()
        .map(|s| {
            let (h, w) = s.mask.dims();
            let vector = masked_pool(&s.features, &s.mask, h, w)
                .map_err(|e| Error::EmptyRegion(format!("support sample {}: {e}", s.source_id)))?;
            Ok(RegionFeature { vector, category: s.category, source_id: s.source_id.clone() })
        })
        .collect()
}

/// Clusters already-pooled region features per class.
pub fn cluster_regions(
    regions: &[RegionFeature],
    vocabulary: &CategoryVocabulary,
    config: &PrototypeBuildConfig,
) -> Result<PrototypeSet> {
    config.validate()?;
    if vocabulary.is_empty() {
        return Err(Error::config("classes", "vocabulary has no classes"));
    }
    let dim = regions.first().map(|r| r.vector.len()).unwrap_or(0);
    if let Some(r) = regions.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::Shape(format!("region {} has dim {}, expected {dim}", r.source_id, r.vector.len())));
    }
    if let Some(r) = regions.iter().find(|r| vocabulary.name(r.category).is_none() || r.category == 0) {
        return Err(Error::UnknownLabel { label: r.category, n_classes: vocabulary.len() });
    }
    let missing: Vec<String> = vocabulary
        .indices()
        .filter(|&c| !regions.iter().any(|r| r.category == c))
        .map(|c| vocabulary.name(c).unwrap().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass(missing));
    }

    let classes = vocabulary
        .indices()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| {
            let points: Vec<Vec<f64>> =
                regions.iter().filter(|r| r.category == c).map(|r| r.vector.clone()).collect();
            let km = kmeans(
                &points,
                &KMeansConfig { k: config.k, max_iters: config.max_iters, seed: config.seed },
            )?;
            Ok(ClassPrototypes {
                class_index: c,
                name: vocabulary.name(c).unwrap().to_string(),
                centroids: km
                    .centroids
                    .iter()
                    .map(|p| p.iter().map(|&v| v as f32).collect())
                    .collect(),
                n_samples: points.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PrototypeSet::new(dim, classes, config.clone())
}

/// Pools every support sample and clusters each class into at most `config.k`
/// prototypes.
pub fn build_prototypes(
    samples: &[SupportSample],
    vocabulary: &CategoryVocabulary,
    config: &PrototypeBuildConfig,
) -> Result<PrototypeSet> {
    config.validate()?;
    let regions = pool_support(samples)?;
    cluster_regions(&regions, vocabulary, config)
}

/// Loads every sample listed in a support manifest.
pub fn load_support(manifest: &SupportManifest) -> Result<(CategoryVocabulary, Vec<SupportSample>)> {
    let vocabulary = manifest.vocabulary()?;
    let samples = manifest
        .samples
        .iter()
        .map(|s| {
            let category = vocabulary.index_of(&s.category).ok_or_else(|| {
                Error::config("samples.category", format!("{:?} is not in the vocabulary", s.category))
            })?;
            let features = read_feature_map(&s.feature_path)?;
            let masks = read_mask_set(&s.mask_path)?;
            if masks.dims() != (manifest.image_height, manifest.image_width) {
                return Err(Error::Shape(format!(
                    "{}: mask is {}x{}, manifest says {}x{}",
                    s.mask_path.display(),
                    masks.height(),
                    masks.width(),
                    manifest.image_height,
                    manifest.image_width
                )));
            }
            Ok(SupportSample {
                category,
                features,
                mask: masks.union(),
                source_id: s.feature_path.display().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vocabulary, samples))
}

/// Loads a support set and checks every sample: known class, image-sized
/// non-empty mask, and one feature dimension across samples. Returns the
/// number of samples.
pub fn check_support(manifest: &SupportManifest) -> Result<usize> {
    let (_, samples) = load_support(manifest)?;
    let dim = samples.first().map(|s| s.features.dim());
    for s in &samples {
        if Some(s.features.dim()) != dim {
            return Err(Error::Shape(format!("{}: dim {}, expected {}", s.source_id, s.features.dim(), dim.unwrap())));
        }
        if s.mask.is_empty() {
            return Err(Error::EmptyRegion(format!("support sample {} has an empty mask", s.source_id)));
        }
    }
    Ok(samples.len())
}

const BANK_FORMAT: &str = "ovcd-prototypes";

#[derive(Serialize, Deserialize)]
struct BankSidecar {
    format: String,
    version: u32,
    tensor: PathBuf,
    dim: usize,
    rows: usize,
    classes: Vec<BankClass>,
    build: PrototypeBuildConfig,
}

#[derive(Serialize, Deserialize)]
struct BankClass {
    index: u32,
    name: String,
    start: usize,
    end: usize,
    n_samples: usize,
}

fn tensor_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("ovft")
}

/// Writes the bank as an `OVFT` tensor of shape `(rows, 1, dim)` next to a JSON
/// sidecar at `path` that maps row ranges to classes and records build settings.
pub fn save_prototypes(set: &PrototypeSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensor = tensor_path(path);
    let rows = set.total_prototypes();
    if rows == 0 {
        return Err(Error::Shape("cannot save an empty prototype bank".into()));
    }
    let mut data = Vec::with_capacity(rows * set.dim);
    let mut classes = Vec::with_capacity(set.classes.len());
    for c in &set.classes {
        let start = data.len() / set.dim;
        for p in &c.centroids {
            data.extend_from_slice(p);
        }
        classes.push(BankClass {
            index: c.class_index,
            name: c.name.clone(),
            start,
            end: start + c.centroids.len(),
            n_samples: c.n_samples,
        });
    }
    write_feature_map(&FeatureMap::new(rows, 1, set.dim, data)?, &tensor)?;
    let sidecar = BankSidecar {
        format: BANK_FORMAT.into(),
        version: 1,
        tensor: tensor.file_name().expect("sidecar path has a file name").into(),
        dim: set.dim,
        rows,
        classes,
        build: set.build.clone(),
    };
    write_json(&sidecar, path)
}

/// Reads a bank written by [`save_prototypes`]. When `expected_dim` is given,
/// a bank of any other feature dimension is rejected.
pub fn load_prototypes(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<PrototypeSet> {
    let path = path.as_ref();
    read_bank(path, expected_dim).map_err(|e| e.in_file(path))
}

fn read_bank(path: &Path, expected_dim: Option<usize>) -> Result<PrototypeSet> {
    let sidecar: BankSidecar = read_json(path)?;
    if sidecar.format != BANK_FORMAT || sidecar.version != 1 {
        return Err(Error::format(
            "format",
            format!("expected {BANK_FORMAT} v1, found {} v{}", sidecar.format, sidecar.version),
        ));
    }
    if let Some(d) = expected_dim {
        if d != sidecar.dim {
            return Err(Error::format("dim", format!("bank has dim {}, expected {d}", sidecar.dim)));
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let tensor = read_feature_map(base.join(&sidecar.tensor))?;
    if (tensor.height(), tensor.width(), tensor.dim()) != (sidecar.rows, 1, sidecar.dim) {
        return Err(Error::format(
            "tensor",
            format!(
                "tensor is {}x{}x{}, sidecar says {}x1x{}",
                tensor.height(),
                tensor.width(),
                tensor.dim(),
                sidecar.rows,
                sidecar.dim
            ),
        ));
    }
    let mut next = 0;
    let mut classes = Vec::with_capacity(sidecar.classes.len());
    for c in sidecar.classes {
        if c.start != next || c.end <= c.start || c.end > sidecar.rows {
            return Err(Error::format("classes", format!("bad row range {}..{} for {:?}", c.start, c.end, c.name)));
        }
        next = c.end;
        classes.push(ClassPrototypes {
            class_index: c.index,
            name: c.name,
            centroids: (c.start..c.end).map(|r| tensor.at(r, 0).to_vec()).collect(),
            n_samples: c.n_samples,
        });
    }
    if next != sidecar.rows {
        return Err(Error::format("classes", format!("row ranges cover {next} of {} rows", sidecar.rows)));
    }
    PrototypeSet::new(sidecar.dim, classes, sidecar.build)
}

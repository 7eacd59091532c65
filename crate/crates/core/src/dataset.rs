//! Category vocabularies and the JSON manifests that tie feature and mask files
//! together.
//!
//! Paths inside a manifest are stored as written and resolved against the
//! manifest's own directory when loaded, so a dataset directory can be moved
//! as a unit.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{read_feature_map, FeatureMap};
use crate::mask::{read_json, read_label_raster, read_mask_set, write_json, InstanceMask, LabelRaster, MaskSet};

pub const BACKGROUND: &str = "background";

/// Ordered class names. Index 0 is the implicit background / no-change class;
/// `names[i]` has class index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryVocabulary {
    names: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::config("classes", "class names must be non-empty"));
            }
            if n == BACKGROUND {
                return Err(Error::config("classes", "`background` is reserved for index 0"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::config("classes", format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Number of foreground classes.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: u32) -> Option<&str> {
        match index {
            0 => Some(BACKGROUND),
            i => self.names.get(i as usize - 1).map(String::as_str),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32 + 1)
    }

    /// Foreground class names in index order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Foreground class indices `1..=len`.
    pub fn indices(&self) -> impl Iterator<Item = u32> {
        1..=self.names.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub t1_feature_path: PathBuf,
    pub t2_feature_path: PathBuf,
    pub t1_mask_path: PathBuf,
    pub t2_mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_change_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_semantic_t1_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_semantic_t2_path: Option<PathBuf>,
    /// Binary change-region raster from a weakly supervised localizer, used for fusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_region_path: Option<PathBuf>,
}

impl PairEntry {
    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.t1_feature_path, &mut self.t2_feature_path, &mut self.t1_mask_path, &mut self.t2_mask_path]
            .into_iter()
            .chain(self.gt_change_path.as_mut())
            .chain(self.gt_semantic_t1_path.as_mut())
            .chain(self.gt_semantic_t2_path.as_mut())
            .chain(self.change_region_path.as_mut())
    }

    pub fn load_features(&self) -> Result<(FeatureMap, FeatureMap)> {
        Ok((read_feature_map(&self.t1_feature_path)?, read_feature_map(&self.t2_feature_path)?))
    }

    pub fn load_masks(&self) -> Result<(MaskSet, MaskSet)> {
        Ok((read_mask_set(&self.t1_mask_path)?, read_mask_set(&self.t2_mask_path)?))
    }

    pub fn load_gt_change(&self) -> Result<Option<MaskSet>> {
        self.gt_change_path.as_ref().map(read_mask_set).transpose()
    }

    pub fn load_gt_semantic(&self) -> Result<Option<(LabelRaster, LabelRaster)>> {
        match (&self.gt_semantic_t1_path, &self.gt_semantic_t2_path) {
            (Some(a), Some(b)) => Ok(Some((read_label_raster(a)?, read_label_raster(b)?))),
            (None, None) => Ok(None),
            _ => Err(Error::config(
                "gt_semantic",
                format!("pair {} lists only one of the two semantic rasters", self.id),
            )),
        }
    }

    pub fn load_change_region(&self) -> Result<Option<InstanceMask>> {
        Ok(self.change_region_path.as_ref().map(read_mask_set).transpose()?.map(|s| s.union()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default)]
    pub classes: Vec<String>,
    pub pairs: Vec<PairEntry>,
}

fn resolve(base: &Path, p: &mut PathBuf) -> Result<()> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if !p.exists() {
        return Err(Error::io(
            p.clone(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
        ));
    }
    Ok(())
}

impl DatasetManifest {
    /// Reads a manifest and resolves every referenced path, failing on the
    /// first one that does not exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut manifest: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ids = HashSet::new();
        for pair in &mut manifest.pairs {
            if !ids.insert(pair.id.clone()) {
                return Err(Error::format("pairs", format!("duplicate pair id {:?}", pair.id)));
            }
            for p in pair.paths_mut() {
                resolve(base, p)?;
            }
        }
        if manifest.image_height == 0 || manifest.image_width == 0 {
            return Err(Error::format("image_height", "image dimensions must be >= 1"));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn vocabulary(&self) -> Result<CategoryVocabulary> {
        CategoryVocabulary::new(self.classes.iter().cloned())
    }

    /// Reads every referenced file with the regular readers and checks that
    /// sizes agree with the manifest: masks and rasters at image size, both
    /// feature maps with the same shape, labels within `classes` when listed.
    /// Returns the number of files read.
    pub fn check_files(&self) -> Result<usize> {
        let dims = (self.image_height, self.image_width);
        let max_label = (!self.classes.is_empty()).then(|| self.vocabulary()).transpose()?.map(|v| v.len() as u32);
        let mut files = 0;
        for pair in &self.pairs {
            let check = || -> Result<usize> {
                let (f1, f2) = pair.load_features()?;
                if (f1.height(), f1.width(), f1.dim()) != (f2.height(), f2.width(), f2.dim()) {
                    return Err(Error::Shape(format!(
                        "feature maps differ: {}x{}x{} vs {}x{}x{}",
                        f1.height(),
                        f1.width(),
                        f1.dim(),
                        f2.height(),
                        f2.width(),
                        f2.dim()
                    )));
                }
                let (m1, m2) = pair.load_masks()?;
                let mut sized = vec![(&pair.t1_mask_path, m1.dims()), (&pair.t2_mask_path, m2.dims())];
                let gt_change = pair.load_gt_change()?;
                if let (Some(p), Some(g)) = (&pair.gt_change_path, &gt_change) {
                    sized.push((p, g.dims()));
                }
                let region = pair.change_region_path.as_ref().map(read_mask_set).transpose()?;
                if let (Some(p), Some(r)) = (&pair.change_region_path, &region) {
                    sized.push((p, r.dims()));
                }
                let gt_semantic = pair.load_gt_semantic()?;
                if let (Some(a), Some(b), Some((g1, g2))) =
                    (&pair.gt_semantic_t1_path, &pair.gt_semantic_t2_path, &gt_semantic)
                {
                    sized.push((a, g1.dims()));
                    sized.push((b, g2.dims()));
                    if let Some(n) = max_label {
                        for (p, g) in [(a, g1), (b, g2)] {
                            if g.max_label() > n {
                                return Err(Error::format(
                                    "labels",
                                    format!("{}: label {} but only {n} classes listed", p.display(), g.max_label()),
                                ));
                            }
                        }
                    }
                }
                for (p, d) in &sized {
                    if *d != dims {
                        return Err(Error::Shape(format!(
                            "{} is {}x{}, manifest says {}x{}",
                            p.display(),
                            d.0,
                            d.1,
                            dims.0,
                            dims.1
                        )));
                    }
                }
                Ok(sized.len() + 2)
            };
            files += check().map_err(|e| e.in_pair(&pair.id))?;
        }
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub category: String,
    pub feature_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Support imagery for prototype construction: one feature file plus one
/// localization-mask sidecar per sample. Multiple mask instances in a sidecar
/// are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportManifest {
    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<String>,
    pub samples: Vec<SupportEntry>,
}

impl SupportManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut manifest: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut manifest.samples {
            resolve(base, &mut s.feature_path)?;
            resolve(base, &mut s.mask_path)?;
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn vocabulary(&self) -> Result<CategoryVocabulary> {
        CategoryVocabulary::new(self.classes.iter().cloned())
    }
}

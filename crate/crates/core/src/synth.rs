//! Seeded synthetic datasets with exact ground truth.
//!
//! Features live on a patch grid. Background patches are zero; every region
//! patch holds its class direction. Class directions are the vertices of a
//! regular simplex, so two different classes always have the same negative
//! cosine and a changed region scores `1/(n-1)` (or `+1` for two classes)
//! while an unchanged one scores `-1`. `cluster_spread` adds Gaussian noise to every
//! patch.
//!
//! Regions sit inside 4x4-patch slots and never fill the last patch row or
//! column of a slot, which keeps at least one background patch between any
//! two regions.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryVocabulary, DatasetManifest, PairEntry, SupportEntry, SupportManifest};
use crate::error::{Error, Result};
use crate::feature::{write_feature_map, FeatureMap};
use crate::mask::{write_json, write_label_raster, write_mask_file, InstanceMask, LabelRaster, MaskSet};

const SLOT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub n_pairs: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub changes_per_pair: usize,
    pub unchanged_per_pair: usize,
    pub distractors_per_pair: usize,
    pub support_per_class: usize,
    /// Standard deviation of the per-component noise added to every patch.
    #[serde(alias = "spread")]
    pub cluster_spread: f64,
    pub seed: u64,
    /// Also write a perfect change-region sidecar per pair.
    pub change_region: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: ["water", "building", "vegetation", "road"].map(String::from).to_vec(),
            n_pairs: 8,
            image_size: 128,
            patch_size: 8,
            dim: 16,
            changes_per_pair: 2,
            unchanged_per_pair: 2,
            distractors_per_pair: 2,
            support_per_class: 10,
            cluster_spread: 0.0,
            seed: 0,
            change_region: true,
        }
    }
}

impl SynthConfig {
    /// Reads a TOML file; missing keys take their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Replaces the class list with `n` generated names, `class_1` .. `class_n`.
    pub fn with_n_classes(mut self, n: usize) -> Self {
        self.classes = (1..=n).map(|i| format!("class_{i}")).collect();
        self
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn slots(&self) -> usize {
        (self.grid() / SLOT).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        CategoryVocabulary::new(self.classes.iter().cloned())?;
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "image_size",
                format!("{} is not a positive multiple of patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be >= 1"));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config(
                "cluster_spread",
                format!("{} is not a finite non-negative value", self.cluster_spread),
            ));
        }
        let needed = self.changes_per_pair + self.unchanged_per_pair + self.distractors_per_pair;
        if needed.max(1) > self.slots() {
            return Err(Error::config(
                "image_size",
                format!("{} regions per pair but only {} slots of {SLOT}x{SLOT} patches", needed, self.slots()),
            ));
        }
        if self.classes.len() == 1 && self.changes_per_pair > 0 {
            return Err(Error::config("changes_per_pair", "a change needs at least two classes"));
        }
        Ok(())
    }
}

/// Unit directions for `n` classes in `dim` dimensions: regular-simplex
/// vertices when `dim >= n - 1`, seeded Gaussian directions otherwise.
pub fn class_directions(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    if n == 1 {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        return vec![e];
    }
    let raw: Vec<Vec<f64>> = if dim + 1 >= n {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; dim];
                for k in 1..n {
                    let s = ((k * (k + 1)) as f64).sqrt();
                    v[k - 1] = match i.cmp(&k) {
                        std::cmp::Ordering::Less => 1.0 / s,
                        std::cmp::Ordering::Equal => -(k as f64) / s,
                        std::cmp::Ordering::Greater => 0.0,
                    };
                }
                v
            })
            .collect()
    } else {
        (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect()
    };
    raw.into_iter()
        .map(|v| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| (a / norm) as f32).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Region {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

fn place(slot: usize, per_side: usize, rng: &mut impl Rng) -> Region {
    let (sy, sx) = (slot / per_side, slot % per_side);
    let hp = rng.random_range(2..=3);
    let wp = rng.random_range(2..=3);
    let oy = rng.random_range(0..=SLOT - 1 - hp);
    let ox = rng.random_range(0..=SLOT - 1 - wp);
    let y0 = sy * SLOT + oy;
    let x0 = sx * SLOT + ox;
    Region { y0, x0, y1: y0 + hp, x1: x0 + wp }
}

struct Canvas<'a> {
    cfg: &'a SynthConfig,
    map: FeatureMap,
}

impl<'a> Canvas<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        Ok(Self { cfg, map: FeatureMap::zeros(cfg.grid(), cfg.grid(), cfg.dim)? })
    }

    fn fill(&mut self, r: Region, v: &[f32]) -> Result<()> {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.map.set(y, x, v)?;
            }
        }
        Ok(())
    }

    fn finish(self, noise: &Normal<f64>, rng: &mut impl Rng) -> Result<FeatureMap> {
        let (h, w, d) = (self.map.height(), self.map.width(), self.map.dim());
        let mut data = self.map.into_data();
        if self.cfg.cluster_spread > 0.0 {
            for v in &mut data {
                *v += noise.sample(rng) as f32;
            }
        }
        FeatureMap::new(h, w, d, data)
    }

    fn mask(&self, r: Region) -> Result<InstanceMask> {
        let (s, n) = (self.cfg.patch_size, self.cfg.image_size);
        InstanceMask::rect(n, n, r.y0 * s, r.x0 * s, r.y1 * s, r.x1 * s)
    }
}

/// Paths of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub support: PathBuf,
}

/// Writes `manifest.json`, `support.json`, and their referenced files under
/// `out_dir`. The same config always produces byte-identical files.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_classes = cfg.classes.len();
    let dirs = class_directions(n_classes, cfg.dim, &mut rng);
    let noise = Normal::new(0.0, cfg.cluster_spread.max(f64::MIN_POSITIVE)).expect("validated spread");
    let per_side = cfg.grid() / SLOT;
    let n = cfg.image_size;
    let rel = |p: &Path| p.strip_prefix(out).expect("path under out_dir").to_path_buf();

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let id = format!("pair_{i:03}");
        let dir = out.join("pairs").join(&id);
        mkdir(&dir)?;
        let mut slots: Vec<usize> = (0..cfg.slots()).collect();
        slots.shuffle(&mut rng);
        let mut slots = slots.into_iter();

        let (mut c1, mut c2) = (Canvas::new(cfg)?, Canvas::new(cfg)?);
        let mut all = Vec::new();
        let mut changed = Vec::new();
        let (mut sem1, mut sem2) = (LabelRaster::zeros(n, n)?, LabelRaster::zeros(n, n)?);
        for _ in 0..cfg.changes_per_pair {
            let r = place(slots.next().unwrap(), per_side, &mut rng);
            let a = rng.random_range(0..n_classes);
            let b = (a + rng.random_range(1..n_classes)) % n_classes;
            c1.fill(r, &dirs[a])?;
            c2.fill(r, &dirs[b])?;
            let m = c1.mask(r)?;
            sem1.paint(&m, a as u32 + 1)?;
            sem2.paint(&m, b as u32 + 1)?;
            changed.push(m.clone());
            all.push(m);
        }
        for _ in 0..cfg.unchanged_per_pair {
            let r = place(slots.next().unwrap(), per_side, &mut rng);
            let a = rng.random_range(0..n_classes);
            c1.fill(r, &dirs[a])?;
            c2.fill(r, &dirs[a])?;
            all.push(c1.mask(r)?);
        }
        for _ in 0..cfg.distractors_per_pair {
            let r = place(slots.next().unwrap(), per_side, &mut rng);
            all.push(c1.mask(r)?);
        }
        let f1 = c1.finish(&noise, &mut rng)?;
        let f2 = c2.finish(&noise, &mut rng)?;
        let masks = MaskSet::new(n, n, all)?;
        let changed = MaskSet::new(n, n, changed)?;

        let p = |name: &str| dir.join(name);
        write_feature_map(&f1, p("t1.ovft"))?;
        write_feature_map(&f2, p("t2.ovft"))?;
        write_mask_file(p("t1_masks.json"), &masks, None)?;
        write_mask_file(p("t2_masks.json"), &masks, None)?;
        write_mask_file(p("gt_change.json"), &changed, None)?;
        write_label_raster(p("gt_sem_t1.json"), &sem1)?;
        write_label_raster(p("gt_sem_t2.json"), &sem2)?;
        let change_region_path = if cfg.change_region {
            let region = MaskSet::new(n, n, vec![changed.union()])?;
            write_mask_file(p("change_region.json"), &region, None)?;
            Some(rel(&p("change_region.json")))
        } else {
            None
        };
        pairs.push(PairEntry {
            id,
            t1_feature_path: rel(&p("t1.ovft")),
            t2_feature_path: rel(&p("t2.ovft")),
            t1_mask_path: rel(&p("t1_masks.json")),
            t2_mask_path: rel(&p("t2_masks.json")),
            gt_change_path: Some(rel(&p("gt_change.json"))),
            gt_semantic_t1_path: Some(rel(&p("gt_sem_t1.json"))),
            gt_semantic_t2_path: Some(rel(&p("gt_sem_t2.json"))),
            change_region_path,
        });
    }

    let support_dir = out.join("support");
    mkdir(&support_dir)?;
    let mut samples = Vec::new();
    for (c, name) in cfg.classes.iter().enumerate() {
        for j in 0..cfg.support_per_class {
            let slot = rng.random_range(0..cfg.slots());
            let r = place(slot, per_side, &mut rng);
            let mut canvas = Canvas::new(cfg)?;
            canvas.fill(r, &dirs[c])?;
            let mask = MaskSet::new(n, n, vec![canvas.mask(r)?])?;
            let features = canvas.finish(&noise, &mut rng)?;
            let stem = format!("{name}_{j:03}");
            let fp = support_dir.join(format!("{stem}.ovft"));
            let mp = support_dir.join(format!("{stem}_mask.json"));
            write_feature_map(&features, &fp)?;
            write_mask_file(&mp, &mask, None)?;
            samples.push(SupportEntry { category: name.clone(), feature_path: rel(&fp), mask_path: rel(&mp) });
        }
    }

    let manifest = out.join("manifest.json");
    DatasetManifest { image_height: n, image_width: n, classes: cfg.classes.clone(), pairs }.save(&manifest)?;
    let support = out.join("support.json");
    SupportManifest { image_height: n, image_width: n, classes: cfg.classes.clone(), samples }.save(&support)?;
    write_json(cfg, &out.join("synth_config.json"))?;
    Ok(SynthOutput { manifest, support })
}

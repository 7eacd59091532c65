//! Category identification by cosine retrieval against a prototype bank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelRaster;
use crate::prototype::PrototypeSet;
use crate::proposal::ChangeProposal;

/// `z·p / (‖z‖‖p‖)`, clamped to `[-1, 1]`; zero when either vector is zero.
pub fn cosine_sim(z: &[f64], p: &[f64]) -> Result<f64> {
    if z.len() != p.len() {
        return Err(Error::Shape(format!("cosine of vectors with dims {} and {}", z.len(), p.len())));
    }
    Ok(cosine_unchecked(z, p.iter().copied()))
}

fn cosine_unchecked(z: &[f64], p: impl Iterator<Item = f64> + Clone) -> f64 {
    let dot: f64 = z.iter().zip(p.clone()).map(|(a, b)| a * b).sum();
    let nz: f64 = z.iter().map(|a| a * a).sum();
    let np: f64 = p.map(|b| b * b).sum();
    if nz == 0.0 || np == 0.0 {
        return 0.0;
    }
    (dot / (nz * np).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Highest mean similarity over a class's prototypes.
    CategoryMean,
    /// Class of the single most similar prototype.
    #[default]
    GlobalMax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub strategy: Strategy,
    /// Drop proposals whose two epochs retrieve the same class.
    pub discard_same_class: bool,
}

/// Returns `(class index, similarity)`. For [`Strategy::CategoryMean`] the
/// similarity is the winning class mean. Ties go to the lowest class index,
/// then the lowest prototype index.
pub fn retrieve(z: &[f64], bank: &PrototypeSet, config: &RetrievalConfig) -> Result<(u32, f64)> {
    if bank.is_empty() {
        return Err(Error::config("prototypes", "prototype bank is empty"));
    }
    if z.len() != bank.dim() {
        return Err(Error::Shape(format!("query dim {} vs bank dim {}", z.len(), bank.dim())));
    }
    let mut best: Option<(u32, f64)> = None;
    for class in bank.classes() {
        let sims = class.centroids.iter().map(|p| cosine_unchecked(z, p.iter().map(|&v| v as f64)));
        let score = match config.strategy {
            Strategy::CategoryMean => sims.sum::<f64>() / class.centroids.len() as f64,
            Strategy::GlobalMax => sims.fold(f64::NEG_INFINITY, f64::max),
        };
        let better = match best {
            None => true,
            Some((c, s)) => score > s || (score == s && class.class_index < c),
        };
        if better {
            best = Some((class.class_index, score));
        }
    }
    Ok(best.expect("bank is non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    /// Index into the proposal list the assignment was computed from.
    pub proposal_id: usize,
    pub c1: u32,
    pub c2: u32,
    pub sim1: f64,
    pub sim2: f64,
}

/// Retrieves a class for each epoch of every proposal.
pub fn assign_categories(
    proposals: &[ChangeProposal],
    bank: &PrototypeSet,
    config: &RetrievalConfig,
) -> Result<Vec<CategoryAssignment>> {
    let mut out = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let (c1, sim1) = retrieve(&p.z1, bank, config)?;
        let (c2, sim2) = retrieve(&p.z2, bank, config)?;
        if config.discard_same_class && c1 == c2 {
            continue;
        }
        out.push(CategoryAssignment { proposal_id: i, c1, c2, sim1, sim2 });
    }
    Ok(out)
}

/// Predicted "from" and "to" label rasters. Label 0 means no change; both
/// rasters share the same non-zero support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticChangeMap {
    pub t1: LabelRaster,
    pub t2: LabelRaster,
}

impl SemanticChangeMap {
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Ok(Self { t1: LabelRaster::zeros(height, width)?, t2: LabelRaster::zeros(height, width)? })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.t1.dims()
    }
}

/// Paints assigned proposals in ascending change-score order, so the highest
/// scoring proposal owns any overlapping pixel. Among equal scores the
/// proposal listed first wins.
pub fn rasterize(
    assignments: &[CategoryAssignment],
    proposals: &[ChangeProposal],
    height: usize,
    width: usize,
) -> Result<SemanticChangeMap> {
    let mut map = SemanticChangeMap::empty(height, width)?;
    let mut order: Vec<&CategoryAssignment> = assignments.iter().collect();
    for a in &order {
        if a.proposal_id >= proposals.len() {
            return Err(Error::Shape(format!(
                "assignment refers to proposal {} of {}",
                a.proposal_id,
                proposals.len()
            )));
        }
    }
    order.sort_by(|a, b| {
        let (sa, sb) = (proposals[a.proposal_id].change_score, proposals[b.proposal_id].change_score);
        sa.total_cmp(&sb).then(b.proposal_id.cmp(&a.proposal_id))
    });
    for a in order {
        let mask = &proposals[a.proposal_id].mask;
        map.t1.paint(mask, a.c1)?;
        map.t2.paint(mask, a.c2)?;
    }
    Ok(map)
}

//! Open-vocabulary semantic change detection over precomputed dense features
//! and class-agnostic instance masks.
//!
//! Change proposals come from mask pairs whose pooled features disagree
//! across epochs. Each proposal is then identified by cosine retrieval
//! against per-class visual prototypes built from a small support set.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod feature;
pub mod fusion;
pub mod kmeans;
pub mod mask;
pub mod proposal;
pub mod prototype;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

pub use dataset::{CategoryVocabulary, DatasetManifest, PairEntry, SupportEntry, SupportManifest};
pub use error::{Error, Result};
pub use eval::{ConfusionAccumulator, EvalMode, EvalReport, ScoredRasters};
pub use feature::{read_feature_map, upsample_bilinear, write_feature_map, FeatureMap};
pub use fusion::{binarize_cam, fuse_inference, overlap_ratio, refine_pseudo_label, CamMap, ChangeRegion, FusionConfig, PseudoLabel};
pub use kmeans::{kmeans, KMeans, KMeansConfig};
pub use mask::{InstanceMask, LabelRaster, MaskSet};
pub use proposal::{dedup_masks, propose_changes, propose_from, rescore, score_change, ChangeProposal, Epoch, ProposalConfig};
pub use prototype::{build_prototypes, load_prototypes, masked_pool, save_prototypes, PrototypeBuildConfig, PrototypeSet};
pub use retrieval::{assign_categories, cosine_sim, rasterize, retrieve, CategoryAssignment, RetrievalConfig, SemanticChangeMap, Strategy};
pub use pipeline::{best_alpha, run_pipeline, sweep_alpha, AlphaPoint, Calibration, PipelineConfig, PipelineSummary};
pub use synth::{generate, SynthConfig};

//! Bi-temporal change detection guided by class text embeddings, plus the
//! procedural pair generator, metrics and training harness around it.

pub mod autodiff;
pub mod change_head;
pub mod checkpoint;
pub mod dtco;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod raster;
pub mod tensor;

pub use change_head::{change_logits, loss_cd, loss_total, ChangeHead, ChangeProbMap, LossWeights};
pub use dtco::{dtco_fuse, pool_visual, DtcoParams};
pub use encoders::{normalize_rows, DenseFeatures, PatchFeatures, TextEmbeddings};
pub use error::{Error, Result};
pub use generator::{apply_edits, overlap_statistic, render_scene, star_pair, EditPlan, PairSample, SceneSpec, StarPair};
pub use losses::{loss_lva, loss_pca, loss_seg, patch_similarity_labels, score_map, ScoreMap, SimilarityLabelGrid};
pub use metrics::{aggregate, confusion, metrics, ConfusionCounts, MetricsReport};
pub use model::{Model, ModelConfig};
pub use raster::{BinaryMask, ChangeMask, ImageTensor, LabelMap};
pub use tensor::Tensor;

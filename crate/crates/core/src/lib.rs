//! Semi-supervised hierarchical query classification.
//!
//! The pipeline: build a label graph from the category taxonomy, enrich
//! hashed query embeddings with graph-convolved label features via attention,
//! train against a hierarchy-aware classification loss mixed with intra- and
//! inter-class contrastive terms, then grow the labeled set through
//! neighborhood-aware self-training over the unlabeled pool.

pub mod corpus;
pub mod encoder;
pub mod eval;
mod hashing;
pub mod losses;
pub mod math;
pub mod model;
pub mod selftrain;
mod tape;
pub mod taxonomy;
pub mod trainer;

pub use corpus::{CorpusSplit, QueryRecord, SyntheticConfig, SyntheticCorpus};
pub use encoder::{EmbeddingSource, EmbeddingStore, EncoderParams};
pub use eval::{AblationVariant, EvalResult, PipelineSettings};
pub use losses::LossWeights;
pub use math::Mat;
pub use model::{ModelConfig, ModelParams, Prediction};
pub use selftrain::{Budget, IndexKind, NeighborIndex, RoundReport, SamplerConfig};
pub use taxonomy::{LabelGraph, LabelId, Taxonomy};
pub use trainer::{TrainConfig, TrainReport};

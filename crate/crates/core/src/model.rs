//! Forward computation: GCN over the label graph, query-to-label attention,
//! feature fusion, and a per-label sigmoid head over parents and children.
//!
//! The head covers parent labels then child labels in id order; the root
//! node participates in the graph and (by default) in attention but has no
//! head entry. The reported parent is always `parent_of(child)`, so
//! (child, parent) pairs are consistent by construction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QueryRecord;
use crate::encoder::{EmbeddingSource, EncoderError, EncoderParams};
use crate::hashing::fnv1a64;
use crate::math::Mat;
use crate::tape::{NodeId, Tape};
use crate::taxonomy::{LabelGraph, LabelId, Taxonomy, TaxonomyError};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch in {0}")]
    DimensionMismatch(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint was trained on a different taxonomy")]
    TaxonomyHashMismatch,
    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Construction-time dimensions and switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_q: usize,
    pub d_h: usize,
    pub d_g: usize,
    pub buckets: usize,
    pub hash_seed: u64,
    pub mask_root_attention: bool,
    /// When false the label-hierarchy path is bypassed: `emb_f` is the query
    /// embedding zero-padded to full width and the GCN and alignment weights
    /// drop out of the gradient flow.
    pub fuse_labels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_q: 64,
            d_h: 64,
            d_g: 64,
            buckets: 4096,
            hash_seed: 0x7d0c_5e11,
            mask_root_attention: false,
            fuse_labels: true,
        }
    }
}

/// All trainable parameters plus the fixed label features snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// Node features, one row per graph node; built once at init from the
    /// label texts (root row = mean of the others) and not trained.
    pub label_features: Mat,
    pub gcn_w1: Mat,
    pub gcn_w2: Mat,
    pub align_w: Mat,
    pub head_w: Mat,
    /// 1×L bias row.
    pub head_b: Mat,
    pub mask_root_attention: bool,
    pub fuse_labels: bool,
    pub taxonomy_hash: u64,
    /// Monotonically increasing parameter version; bumped on every update
    /// and used as the GCN cache key.
    pub revision: u64,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    fnv1a64(&seed.to_le_bytes(), tag)
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl ModelParams {
    pub fn init(t: &Taxonomy, cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let encoder =
            EncoderParams::new(cfg.buckets, cfg.d_q, cfg.hash_seed, derive_seed(seed, 1))?;
        let n = t.node_count();
        let mut label_features = Mat::zeros(n, cfg.d_q);
        for idx in 1..n {
            let emb = encoder.encode(t.name(LabelId(idx as u32)))?;
            label_features.row_mut(idx).copy_from_slice(&emb);
        }
        let inv = 1.0 / (n - 1) as f64;
        for idx in 1..n {
            for c in 0..cfg.d_q {
                let v = label_features.at(idx, c);
                label_features.set(0, c, label_features.at(0, c) + v * inv);
            }
        }
        let head_dim = t.parents().len() + t.children().len();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 2));
        Ok(ModelParams {
            encoder,
            label_features,
            gcn_w1: xavier(cfg.d_q, cfg.d_h, &mut rng),
            gcn_w2: xavier(cfg.d_h, cfg.d_g, &mut rng),
            align_w: xavier(cfg.d_q, cfg.d_g, &mut rng),
            head_w: xavier(cfg.d_q + cfg.d_g, head_dim, &mut rng),
            head_b: Mat::zeros(1, head_dim),
            mask_root_attention: cfg.mask_root_attention,
            fuse_labels: cfg.fuse_labels,
            taxonomy_hash: t.structural_hash(),
            revision: 0,
        })
    }

    pub fn d_q(&self) -> usize {
        self.align_w.rows()
    }

    pub fn d_g(&self) -> usize {
        self.align_w.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.head_w.cols()
    }

    /// Count of parameters that receive gradients under the given source and
    /// fusion settings.
    pub fn trainable_param_count(&self, builtin_encoder: bool) -> usize {
        let mut n = self.head_w.len() + self.head_b.len();
        if builtin_encoder {
            n += self.encoder.table.len();
        }
        if self.fuse_labels {
            n += self.gcn_w1.len() + self.gcn_w2.len() + self.align_w.len();
        }
        n
    }

    pub fn validate(&self, t: &Taxonomy, g: &LabelGraph) -> Result<(), ModelError> {
        let n = t.node_count();
        let head_dim = t.parents().len() + t.children().len();
        let ok = self.label_features.rows() == n
            && g.adjacency.rows() == n
            && self.label_features.cols() == self.gcn_w1.rows()
            && self.gcn_w1.cols() == self.gcn_w2.rows()
            && self.align_w.rows() == self.encoder.d_q
            && self.align_w.cols() == self.gcn_w2.cols()
            && self.head_w.rows() == self.encoder.d_q + self.align_w.cols()
            && self.head_w.cols() == head_dim
            && self.head_b.cols() == head_dim;
        if !ok {
            return Err(ModelError::DimensionMismatch("model parameters"));
        }
        for m in [
            &self.label_features,
            &self.gcn_w1,
            &self.gcn_w2,
            &self.align_w,
            &self.head_w,
            &self.head_b,
            &self.encoder.table,
        ] {
            if !m.all_finite() {
                return Err(ModelError::DimensionMismatch("non-finite parameters"));
            }
        }
        Ok(())
    }
}

/// Position of a label in the head output: parents first, then children.
pub fn head_index(t: &Taxonomy, label: LabelId) -> usize {
    if t.is_child(label) {
        t.parents().len() + t.child_position(label)
    } else {
        t.parent_position(label)
    }
}

/// Per-label sigmoid scores plus the consistent (child, parent) decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Parent labels then child labels, in id order; independent sigmoids.
    pub probs: Vec<f64>,
    pub child: LabelId,
    pub parent: LabelId,
}

impl Prediction {
    fn from_probs(t: &Taxonomy, probs: Vec<f64>) -> Self {
        let p = t.parents().len();
        let child_slice = &probs[p..];
        let mut best = 0usize;
        for (i, &v) in child_slice.iter().enumerate() {
            if v > child_slice[best] {
                best = i;
            }
        }
        let child = t.children()[best];
        let parent = t.parent_of(child).expect("children have parents");
        Prediction { probs, child, parent }
    }

    pub fn child_probs<'a>(&'a self, t: &Taxonomy) -> &'a [f64] {
        &self.probs[t.parents().len()..]
    }

    pub fn parent_probs<'a>(&'a self, t: &Taxonomy) -> &'a [f64] {
        &self.probs[..t.parents().len()]
    }

    /// Sigmoid scores over children renormalized to a distribution.
    pub fn child_distribution(&self, t: &Taxonomy) -> Vec<f64> {
        normalize(self.child_probs(t))
    }

    pub fn parent_distribution(&self, t: &Taxonomy) -> Vec<f64> {
        normalize(self.parent_probs(t))
    }

    /// Sigmoid score of the predicted child.
    pub fn child_score(&self, t: &Taxonomy) -> f64 {
        self.child_probs(t)[t.child_position(self.child)]
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    v.iter().map(|&x| x / sum).collect()
}

/// Parameter leaves installed on a tape.
pub(crate) struct ParamNodes {
    pub table: NodeId,
    pub gcn_w1: NodeId,
    pub gcn_w2: NodeId,
    pub align_w: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ParamNodes {
    /// `trainable = true` marks the weight groups that receive gradients;
    /// `train_encoder` additionally covers the bucket table.
    pub fn install(tape: &mut Tape, params: &ModelParams, trainable: bool, train_encoder: bool) -> Self {
        let fuse = params.fuse_labels && trainable;
        ParamNodes {
            table: tape.leaf(params.encoder.table.clone(), trainable && train_encoder),
            gcn_w1: tape.leaf(params.gcn_w1.clone(), fuse),
            gcn_w2: tape.leaf(params.gcn_w2.clone(), fuse),
            align_w: tape.leaf(params.align_w.clone(), fuse),
            head_w: tape.leaf(params.head_w.clone(), trainable),
            head_b: tape.leaf(params.head_b.clone(), trainable),
        }
    }
}

pub(crate) struct ForwardNodes {
    pub emb_q: NodeId,
    pub attn: Option<NodeId>,
    pub emb_f: NodeId,
    pub probs: NodeId,
}

/// Two-layer GCN nodes: `Â·relu(Â·X·W1)·W2` (no nonlinearity on layer 2).
pub(crate) fn gcn_nodes(
    tape: &mut Tape,
    adjacency: &Mat,
    features: &Mat,
    w1: NodeId,
    w2: NodeId,
) -> NodeId {
    let a_hat = tape.constant(adjacency.clone());
    let ax = tape.constant(adjacency.matmul(features));
    let t1 = tape.matmul(ax, w1);
    let h1 = tape.relu(t1);
    let t2 = tape.matmul(h1, w2);
    tape.matmul(a_hat, t2)
}

fn attention_nodes(
    tape: &mut Tape,
    emb_q: NodeId,
    emb_g: NodeId,
    align_w: NodeId,
    mask_root: bool,
) -> (NodeId, NodeId) {
    let aligned = tape.matmul(emb_q, align_w);
    let mut logits = tape.matmul_tb(aligned, emb_g);
    if mask_root {
        let cols = tape.value(logits).cols();
        let mut mask = Mat::zeros(1, cols);
        mask.set(0, 0, -1e30);
        let mask = tape.constant(mask);
        logits = tape.add_row(logits, mask);
    }
    let attn = tape.softmax_rows(logits);
    let emb_l = tape.matmul(attn, emb_g);
    (attn, emb_l)
}

/// Assembles the full forward graph from a query-embedding node.
pub(crate) fn build_forward(
    tape: &mut Tape,
    leaves: &ParamNodes,
    params: &ModelParams,
    graph: &LabelGraph,
    emb_q: NodeId,
) -> ForwardNodes {
    let batch = tape.value(emb_q).rows();
    let (attn, emb_f) = if params.fuse_labels {
        let emb_g = gcn_nodes(tape, &graph.adjacency, &params.label_features, leaves.gcn_w1, leaves.gcn_w2);
        let (attn, emb_l) =
            attention_nodes(tape, emb_q, emb_g, leaves.align_w, params.mask_root_attention);
        (Some(attn), tape.concat_cols(emb_q, emb_l))
    } else {
        let pad = tape.constant(Mat::zeros(batch, params.d_g()));
        (None, tape.concat_cols(emb_q, pad))
    };
    let scores = tape.matmul(emb_f, leaves.head_w);
    let biased = tape.add_row(scores, leaves.head_b);
    let probs = tape.sigmoid(biased);
    ForwardNodes { emb_q, attn, emb_f, probs }
}

/// Bucket multisets (builtin encoder) or dense rows (external store) for a
/// batch of queries.
pub(crate) enum QueryFeatures {
    Buckets(Vec<Vec<(usize, usize)>>),
    Dense(Mat),
}

pub(crate) fn query_features(
    params: &ModelParams,
    source: &EmbeddingSource,
    records: &[&QueryRecord],
) -> Result<QueryFeatures, ModelError> {
    match source {
        EmbeddingSource::Builtin => {
            let mut rows = Vec::with_capacity(records.len());
            for r in records {
                let counts = params.encoder.bucket_counts(&r.text)?;
                rows.push(counts.into_iter().collect());
            }
            Ok(QueryFeatures::Buckets(rows))
        }
        EmbeddingSource::External(store) => {
            if store.width() != params.encoder.d_q {
                return Err(ModelError::DimensionMismatch("embedding store width"));
            }
            let mut m = Mat::zeros(records.len(), store.width());
            for (i, r) in records.iter().enumerate() {
                m.row_mut(i).copy_from_slice(store.get(&r.id)?);
            }
            Ok(QueryFeatures::Dense(m))
        }
    }
}

pub(crate) fn install_query_node(
    tape: &mut Tape,
    leaves: &ParamNodes,
    features: QueryFeatures,
) -> NodeId {
    match features {
        QueryFeatures::Buckets(rows) => tape.embed_mean(leaves.table, rows),
        QueryFeatures::Dense(m) => tape.constant(m),
    }
}

/// Forward outputs for a batch.
pub struct BatchForward {
    pub emb_q: Mat,
    pub emb_f: Mat,
    pub probs: Mat,
    pub attn: Option<Mat>,
}

/// Runs the forward pass (no gradients) for a batch of queries.
pub fn forward_batch(
    params: &ModelParams,
    graph: &LabelGraph,
    records: &[&QueryRecord],
    source: &EmbeddingSource,
) -> Result<BatchForward, ModelError> {
    let mut tape = Tape::new();
    let leaves = ParamNodes::install(&mut tape, params, false, false);
    let features = query_features(params, source, records)?;
    let emb_q = install_query_node(&mut tape, &leaves, features);
    let nodes = build_forward(&mut tape, &leaves, params, graph, emb_q);
    Ok(BatchForward {
        emb_q: tape.value(nodes.emb_q).clone(),
        emb_f: tape.value(nodes.emb_f).clone(),
        probs: tape.value(nodes.probs).clone(),
        attn: nodes.attn.map(|a| tape.value(a).clone()),
    })
}

/// Classifies one query.
pub fn forward(
    q: &QueryRecord,
    graph: &LabelGraph,
    t: &Taxonomy,
    params: &ModelParams,
    source: &EmbeddingSource,
) -> Result<Prediction, ModelError> {
    let out = forward_batch(params, graph, &[q], source)?;
    Ok(Prediction::from_probs(t, out.probs.row(0).to_vec()))
}

/// Classifies a batch, preserving record order.
pub fn predict_batch(
    records: &[&QueryRecord],
    graph: &LabelGraph,
    t: &Taxonomy,
    params: &ModelParams,
    source: &EmbeddingSource,
) -> Result<Vec<Prediction>, ModelError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let out = forward_batch(params, graph, records, source)?;
    Ok((0..records.len())
        .map(|i| Prediction::from_probs(t, out.probs.row(i).to_vec()))
        .collect())
}

/// Fused feature rows (`emb_f`) for a batch, identical per row to the value
/// `forward` computes internally.
pub fn batch_embed(
    records: &[&QueryRecord],
    graph: &LabelGraph,
    params: &ModelParams,
    source: &EmbeddingSource,
) -> Result<Mat, ModelError> {
    if records.is_empty() {
        return Ok(Mat::zeros(0, params.encoder.d_q + params.d_g()));
    }
    Ok(forward_batch(params, graph, records, source)?.emb_f)
}

/// Two-layer GCN over the label graph.
pub fn gcn_forward(graph: &LabelGraph, params: &ModelParams) -> Result<Mat, ModelError> {
    if params.label_features.rows() != graph.adjacency.rows()
        || params.label_features.cols() != params.gcn_w1.rows()
        || params.gcn_w1.cols() != params.gcn_w2.rows()
    {
        return Err(ModelError::DimensionMismatch("gcn_forward"));
    }
    let mut tape = Tape::new();
    let w1 = tape.constant(params.gcn_w1.clone());
    let w2 = tape.constant(params.gcn_w2.clone());
    let out = gcn_nodes(&mut tape, &graph.adjacency, &params.label_features, w1, w2);
    Ok(tape.value(out).clone())
}

/// Attention over label embeddings; returns `(emb_l, attn)`.
pub fn attention_fuse(
    emb_q: &[f64],
    emb_g: &Mat,
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if emb_q.len() != params.align_w.rows() || emb_g.cols() != params.align_w.cols() {
        return Err(ModelError::DimensionMismatch("attention_fuse"));
    }
    let mut tape = Tape::new();
    let q = tape.constant(Mat::row_vector(emb_q.to_vec()));
    let g = tape.constant(emb_g.clone());
    let align = tape.constant(params.align_w.clone());
    let (attn, emb_l) = attention_nodes(&mut tape, q, g, align, params.mask_root_attention);
    Ok((tape.value(emb_l).row(0).to_vec(), tape.value(attn).row(0).to_vec()))
}

/// Caches the GCN output keyed by the parameter revision.
#[derive(Default)]
pub struct GcnCache {
    entry: Option<(u64, Mat)>,
}

impl GcnCache {
    pub fn get(&mut self, params: &ModelParams, graph: &LabelGraph) -> Result<&Mat, ModelError> {
        let stale = match &self.entry {
            Some((rev, _)) => *rev != params.revision,
            None => true,
        };
        if stale {
            self.entry = Some((params.revision, gcn_forward(graph, params)?));
        }
        Ok(&self.entry.as_ref().expect("entry just filled").1)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    taxonomy_hash: u64,
    params: ModelParams,
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        taxonomy_hash: params.taxonomy_hash,
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Loads a checkpoint, rejecting version or taxonomy mismatches.
pub fn load_checkpoint(path: impl AsRef<Path>, t: &Taxonomy) -> Result<ModelParams, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion(file.version));
    }
    if file.taxonomy_hash != t.structural_hash() {
        return Err(ModelError::TaxonomyHashMismatch);
    }
    Ok(file.params)
}

//! Neighborhood-aware self-training: index labeled queries, score unlabeled
//! predictions by KL agreement with their nearest labeled neighbors, sample
//! a budget of pseudo-labeled queries, and retrain until convergence.

mod hnsw;

pub use hnsw::HnswConfig;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, QueryRecord};
use crate::encoder::EmbeddingSource;
use crate::eval::micro_macro_f1;
use crate::hashing::fnv1a64;
use crate::math::cosine;
use crate::model::{batch_embed, predict_batch, ModelError, ModelParams, Prediction};
use crate::taxonomy::{LabelGraph, LabelId, Taxonomy};
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum SelfTrainError {
    #[error("cannot build an index over an empty labeled set")]
    EmptyIndex,
    #[error("index keys do not match the labeled records")]
    KeyMismatch,
    #[error("query key kind does not match the index kind")]
    KindMismatch,
    #[error("distribution lengths do not match")]
    LengthMismatch,
    #[error("neighborhood is empty")]
    EmptyNeighborhood,
    #[error("sampling budget {budget} exceeds candidate pool {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("neighbor `{0}` has no label")]
    UnlabeledNeighbor(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    ExactCosine,
    HnswCosine,
    Levenshtein,
}

/// Per-round pseudo-labeling budget: an absolute count or a fraction of the
/// current unlabeled pool. Zero disables sampling (rounds degenerate to
/// retraining).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(&self, pool: usize) -> usize {
        match *self {
            Budget::Count(c) => c.min(pool),
            Budget::Fraction(f) => ((f * pool as f64).ceil() as usize).min(pool),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k_neighbors: usize,
    /// Weight of the child-level KL part in the final score.
    pub w_child: f64,
    pub epsilon_smoothing: f64,
    pub temperature_sample: f64,
    pub budget: Budget,
    pub max_rounds: usize,
    /// Rounds without validation Macro-F1 improvement before stopping.
    pub patience_rounds: usize,
    pub index_kind: IndexKind,
    /// Sample proportionally to the raw divergence instead of exp(-Dist/τ),
    /// for comparison experiments.
    pub literal_prob_direction: bool,
    pub hnsw: HnswConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k_neighbors: 10,
            w_child: 0.3,
            epsilon_smoothing: 1e-3,
            temperature_sample: 1.0,
            budget: Budget::Fraction(0.05),
            max_rounds: 10,
            patience_rounds: 2,
            index_kind: IndexKind::ExactCosine,
            literal_prob_direction: false,
            hnsw: HnswConfig::default(),
        }
    }
}

/// Keys used to build an index: one per labeled record, aligned by position.
pub enum IndexKeys {
    Embeddings(Vec<Vec<f64>>),
    Strings(Vec<String>),
}

/// A query key for lookups.
pub enum KeyRef<'a> {
    Embedding(&'a [f64]),
    Text(&'a str),
}

enum Backend {
    Exact { keys: Vec<Vec<f64>> },
    Hnsw { index: hnsw::HnswIndex },
    Levenshtein { keys: Vec<String> },
}

/// Nearest-neighbor index over labeled queries. Exact and Levenshtein
/// backends return the true K nearest with ties broken by ascending id;
/// the HNSW backend is approximate.
pub struct NeighborIndex {
    ids: Vec<String>,
    backend: Backend,
}

/// Classic two-row dynamic-programming edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Builds a neighbor index of the configured kind over the labeled set.
pub fn build_index(
    labeled: &[QueryRecord],
    keys: IndexKeys,
    cfg: &SamplerConfig,
) -> Result<NeighborIndex, SelfTrainError> {
    if labeled.is_empty() {
        return Err(SelfTrainError::EmptyIndex);
    }
    let ids: Vec<String> = labeled.iter().map(|r| r.id.clone()).collect();
    let backend = match (cfg.index_kind, keys) {
        (IndexKind::ExactCosine, IndexKeys::Embeddings(keys)) => {
            if keys.len() != ids.len() {
                return Err(SelfTrainError::KeyMismatch);
            }
            Backend::Exact { keys }
        }
        (IndexKind::HnswCosine, IndexKeys::Embeddings(keys)) => {
            if keys.len() != ids.len() {
                return Err(SelfTrainError::KeyMismatch);
            }
            Backend::Hnsw { index: hnsw::HnswIndex::build(&keys, cfg.hnsw) }
        }
        (IndexKind::Levenshtein, IndexKeys::Strings(keys)) => {
            if keys.len() != ids.len() {
                return Err(SelfTrainError::KeyMismatch);
            }
            Backend::Levenshtein { keys: keys.into_iter().map(|s| s.to_lowercase()).collect() }
        }
        _ => return Err(SelfTrainError::KeyMismatch),
    };
    Ok(NeighborIndex { ids, backend })
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// K nearest labeled ids with distances, ascending; K larger than the
    /// index returns everything.
    pub fn knn(&self, key: KeyRef, k: usize) -> Result<Vec<(String, f64)>, SelfTrainError> {
        let k = k.min(self.ids.len());
        let hits: Vec<(usize, f64)> = match (&self.backend, key) {
            (Backend::Exact { keys }, KeyRef::Embedding(q)) => {
                let mut scored: Vec<(usize, f64)> = keys
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, 1.0 - cosine(q, v)))
                    .collect();
                scored.sort_by(|a, b| {
                    a.1.total_cmp(&b.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
                });
                scored.truncate(k);
                scored
            }
            (Backend::Hnsw { index }, KeyRef::Embedding(q)) => index.knn(q, k),
            (Backend::Levenshtein { keys }, KeyRef::Text(q)) => {
                let q = q.to_lowercase();
                let mut scored: Vec<(usize, f64)> = keys
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, levenshtein(&q, s) as f64))
                    .collect();
                scored.sort_by(|a, b| {
                    a.1.total_cmp(&b.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
                });
                scored.truncate(k);
                scored
            }
            _ => return Err(SelfTrainError::KindMismatch),
        };
        Ok(hits.into_iter().map(|(i, d)| (self.ids[i].clone(), d)).collect())
    }
}

/// `Σ p·ln(p/q)` in nats with the `0·ln 0 = 0` convention.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, SelfTrainError> {
    if p.len() != q.len() {
        return Err(SelfTrainError::LengthMismatch);
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// Smoothed one-hot: `1-ε` on `index`, `ε/(n-1)` elsewhere (plain 1.0 for a
/// single class).
pub fn onehot_smoothed(n: usize, index: usize, epsilon: f64) -> Vec<f64> {
    debug_assert!(index < n);
    if n == 1 {
        return vec![1.0];
    }
    let off = epsilon / (n - 1) as f64;
    let mut v = vec![off; n];
    v[index] = 1.0 - epsilon;
    v
}

/// Neighborhood agreement score for one unlabeled query (lower is better):
/// at each level, the mean KL from neighbor label one-hots to the predicted
/// distribution plus the mean KL to the neighbors' own mean one-hot, the two
/// levels mixed by `w_child`. Invariant to neighbor order.
pub fn neighborhood_score(
    pred: &Prediction,
    neighbors: &[&QueryRecord],
    t: &Taxonomy,
    cfg: &SamplerConfig,
) -> Result<f64, SelfTrainError> {
    if neighbors.is_empty() {
        return Err(SelfTrainError::EmptyNeighborhood);
    }
    let eps = cfg.epsilon_smoothing;
    let n_children = t.children().len();
    let n_parents = t.parents().len();

    // class counts make the computation order-free
    let mut child_counts = vec![0usize; n_children];
    let mut parent_counts = vec![0usize; n_parents];
    for r in neighbors {
        let child = r
            .child_label
            .ok_or_else(|| SelfTrainError::UnlabeledNeighbor(r.id.clone()))?;
        child_counts[t.child_position(child)] += 1;
        let parent = t.parent_of(child).expect("child has parent");
        parent_counts[t.parent_position(parent)] += 1;
    }
    let k = neighbors.len() as f64;

    let level_score = |counts: &[usize], pred_dist: &[f64]| -> Result<f64, SelfTrainError> {
        let n = counts.len();
        let mut mean_onehot = vec![0.0; n];
        for (idx, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let onehot = onehot_smoothed(n, idx, eps);
            for (m, o) in mean_onehot.iter_mut().zip(onehot.iter()) {
                *m += o * c as f64 / k;
            }
        }
        let mut to_pred = 0.0;
        let mut to_mean = 0.0;
        for (idx, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let onehot = onehot_smoothed(n, idx, eps);
            let w = c as f64 / k;
            to_pred += w * kl_divergence(&onehot, pred_dist)?;
            to_mean += w * kl_divergence(&onehot, &mean_onehot)?;
        }
        Ok(to_pred + to_mean)
    };

    let child_part = level_score(&child_counts, &pred.child_distribution(t))?;
    let parent_part = level_score(&parent_counts, &pred.parent_distribution(t))?;
    Ok(cfg.w_child * child_part + (1.0 - cfg.w_child) * parent_part)
}

/// Samples `budget` ids without replacement with probability proportional to
/// `exp(-Dist/τ)` (or to `Dist` itself with `literal_prob_direction`);
/// deterministic for a given seed. A degenerate all-zero weight vector falls
/// back to uniform sampling.
pub fn sample_candidates(
    scored: &[(String, f64)],
    budget: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<String>, SelfTrainError> {
    if budget > scored.len() {
        return Err(SelfTrainError::BudgetExceedsPool { budget, pool: scored.len() });
    }
    let mut weights: Vec<f64> = scored
        .iter()
        .map(|(_, dist)| {
            if cfg.literal_prob_direction {
                dist.max(0.0)
            } else {
                (-dist / cfg.temperature_sample).exp()
            }
        })
        .collect();
    let mut remaining: Vec<usize> = (0..scored.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(budget);
    for _ in 0..budget {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pick_pos = if total > 0.0 && total.is_finite() {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = remaining.len() - 1;
            for (pos, &i) in remaining.iter().enumerate() {
                r -= weights[i];
                if r <= 0.0 {
                    chosen = pos;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..remaining.len())
        };
        let idx = remaining.remove(pick_pos);
        weights[idx] = 0.0;
        selected.push(scored[idx].0.clone());
    }
    Ok(selected)
}

/// One sampled pseudo-labeled query in a round's ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledQuery {
    pub id: String,
    pub pseudo_child: String,
    pub pseudo_parent: String,
    pub dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<SampledQuery>,
    pub labeled_size: usize,
    pub val_child_micro_f1: f64,
    pub val_child_macro_f1: f64,
    pub val_parent_micro_f1: f64,
    pub val_parent_macro_f1: f64,
}

/// Ledger TSV: `round \t id \t pseudo_child \t pseudo_parent \t dist`.
pub fn sampled_ledger_tsv(rounds: &[RoundReport]) -> String {
    let mut out = String::from("round\tid\tpseudo_child\tpseudo_parent\tdist\n");
    for r in rounds {
        for s in &r.sampled {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.round, s.id, s.pseudo_child, s.pseudo_parent, s.dist
            ));
        }
    }
    out
}

fn index_keys_for(
    labeled: &[QueryRecord],
    g: &LabelGraph,
    params: &ModelParams,
    cfg: &SamplerConfig,
    source: &EmbeddingSource,
) -> Result<IndexKeys, SelfTrainError> {
    match cfg.index_kind {
        IndexKind::Levenshtein => {
            Ok(IndexKeys::Strings(labeled.iter().map(|r| r.text.to_lowercase()).collect()))
        }
        IndexKind::ExactCosine | IndexKind::HnswCosine => {
            let refs: Vec<&QueryRecord> = labeled.iter().collect();
            let embs = batch_embed(&refs, g, params, source)?;
            Ok(IndexKeys::Embeddings((0..embs.rows()).map(|i| embs.row(i).to_vec()).collect()))
        }
    }
}

fn validation_f1(
    params: &ModelParams,
    t: &Taxonomy,
    g: &LabelGraph,
    validation: &[QueryRecord],
    source: &EmbeddingSource,
) -> Result<(f64, f64, f64, f64), SelfTrainError> {
    if validation.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let refs: Vec<&QueryRecord> = validation.iter().collect();
    let preds = predict_batch(&refs, g, t, params, source)?;
    let gold: Vec<LabelId> = validation.iter().map(|r| r.child_label.expect("labeled")).collect();
    let r = micro_macro_f1(&gold, &preds, t).map_err(|_| SelfTrainError::LengthMismatch)?;
    Ok((r.child_micro_f1, r.child_macro_f1, r.parent_micro_f1, r.parent_macro_f1))
}

/// The self-training loop: per round, predict the pool, score candidates by
/// neighborhood agreement, sample a budget, append them to the labeled set
/// as pseudo-labeled records, and retrain from the current parameters. Stops
/// at `max_rounds`, on exhausted patience, or immediately when the pool
/// starts empty.
pub fn selftrain_loop(
    split: &CorpusSplit,
    t: &Taxonomy,
    g: &LabelGraph,
    init: ModelParams,
    train_cfg: &TrainConfig,
    cfg: &SamplerConfig,
    source: &EmbeddingSource,
) -> Result<(ModelParams, Vec<RoundReport>), SelfTrainError> {
    let mut params = init;
    let mut reports = Vec::new();
    if split.unlabeled_pool.is_empty() {
        return Ok((params, reports));
    }
    let mut labeled = split.train.clone();
    let mut pool = split.unlabeled_pool.clone();
    let mut best_macro = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for round in 1..=cfg.max_rounds {
        let budget = cfg.budget.resolve(pool.len());
        let mut sampled = Vec::new();

        if budget > 0 {
            let pool_refs: Vec<&QueryRecord> = pool.iter().collect();
            let preds = predict_batch(&pool_refs, g, t, &params, source)?;
            let keys = index_keys_for(&labeled, g, &params, cfg, source)?;
            let index = build_index(&labeled, keys, cfg)?;
            let by_id: BTreeMap<&str, &QueryRecord> =
                labeled.iter().map(|r| (r.id.as_str(), r)).collect();

            let pool_keys: Option<Vec<Vec<f64>>> = match cfg.index_kind {
                IndexKind::Levenshtein => None,
                _ => {
                    let embs = batch_embed(&pool_refs, g, &params, source)?;
                    Some((0..embs.rows()).map(|i| embs.row(i).to_vec()).collect())
                }
            };

            let scored: Vec<(String, f64)> = (0..pool.len())
                .into_par_iter()
                .map(|i| -> Result<(String, f64), SelfTrainError> {
                    let key = match &pool_keys {
                        Some(keys) => KeyRef::Embedding(&keys[i]),
                        None => KeyRef::Text(&pool[i].text),
                    };
                    let hits = index.knn(key, cfg.k_neighbors)?;
                    let neighbors: Vec<&QueryRecord> =
                        hits.iter().map(|(id, _)| by_id[id.as_str()]).collect();
                    let dist = neighborhood_score(&preds[i], &neighbors, t, cfg)?;
                    Ok((pool[i].id.clone(), dist))
                })
                .collect::<Result<_, _>>()?;

            let seed = fnv1a64(&train_cfg.seed.to_le_bytes(), round as u64);
            let chosen = sample_candidates(&scored, budget, seed, cfg)?;
            let chosen_set: std::collections::BTreeSet<&str> =
                chosen.iter().map(|s| s.as_str()).collect();
            let dist_by_id: BTreeMap<&str, f64> =
                scored.iter().map(|(id, d)| (id.as_str(), *d)).collect();
            let pred_by_id: BTreeMap<&str, &Prediction> = pool
                .iter()
                .zip(preds.iter())
                .map(|(r, p)| (r.id.as_str(), p))
                .collect();

            for id in &chosen {
                let record = pool.iter().find(|r| &r.id == id).expect("sampled from pool");
                let pred = pred_by_id[id.as_str()];
                sampled.push(SampledQuery {
                    id: id.clone(),
                    pseudo_child: t.name(pred.child).to_string(),
                    pseudo_parent: t.name(pred.parent).to_string(),
                    dist: dist_by_id[id.as_str()],
                });
                labeled.push(QueryRecord {
                    id: record.id.clone(),
                    text: record.text.clone(),
                    child_label: Some(pred.child),
                });
            }
            pool.retain(|r| !chosen_set.contains(r.id.as_str()));
        }

        let augmented = CorpusSplit {
            train: labeled.clone(),
            validation: split.validation.clone(),
            test: Vec::new(),
            unlabeled_pool: Vec::new(),
        };
        let (next, _) = train(&augmented, t, g, &params, train_cfg, source)?;
        params = next;

        let (vmic, vmac, pmic, pmac) = validation_f1(&params, t, g, &split.validation, source)?;
        reports.push(RoundReport {
            round,
            sampled,
            labeled_size: labeled.len(),
            val_child_micro_f1: vmic,
            val_child_macro_f1: vmac,
            val_parent_micro_f1: pmic,
            val_parent_macro_f1: pmac,
        });

        if vmac > best_macro {
            best_macro = vmac;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience_rounds {
                break;
            }
        }
    }
    Ok((params, reports))
}

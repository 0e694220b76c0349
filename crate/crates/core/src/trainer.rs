//! Adam training of the model against the combined objective, with
//! deterministic batch assembly and finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, QueryRecord};
use crate::encoder::EmbeddingSource;
use crate::eval::micro_macro_f1;
use crate::losses::{
    bce_coefficients, contrastive_anchors, ContrastLevel, LossError, LossWeights, PROB_CLAMP,
};
use crate::math::Mat;
use crate::model::{
    build_forward, install_query_node, predict_batch, query_features, ModelError, ModelParams,
    ParamNodes,
};
use crate::tape::{NodeId, Tape};
use crate::taxonomy::{LabelGraph, LabelId, Taxonomy};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training record `{0}` has no label")]
    UnlabeledRecord(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("parameter and gradient shapes do not match")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Epochs without validation Macro-F1 improvement before stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            early_stop_patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_classification: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub val_child_micro_f1: f64,
    pub val_child_macro_f1: f64,
    pub val_parent_micro_f1: f64,
    pub val_parent_macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

/// First/second moment state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Mat,
    pub v: Mat,
}

impl AdamMoments {
    pub fn like(param: &Mat) -> Self {
        AdamMoments { step: 0, m: Mat::zeros(param.rows(), param.cols()), v: Mat::zeros(param.rows(), param.cols()) }
    }
}

/// One bias-corrected Adam update, elementwise in place.
pub fn adam_step(
    param: &mut Mat,
    grad: &Mat,
    state: &mut AdamMoments,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !param.same_shape(grad) || !param.same_shape(&state.m) || !param.same_shape(&state.v) {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.adam_beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice().iter())
        .zip(state.m.as_mut_slice().iter_mut().zip(state.v.as_mut_slice().iter_mut()))
    {
        *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
        *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Groups a batch's queries by (parent, child) class.
struct ClassQueue {
    parent: LabelId,
    child: LabelId,
    items: Vec<usize>,
}

/// Deterministic stratified batch assembly. Whenever some parent still has
/// records in at least two child classes, the batch opens with one record
/// from each of that parent's two fullest classes, so intra-class positives
/// and negatives coexist; remaining slots round-robin across classes.
pub(crate) fn assemble_batches(
    records: &[QueryRecord],
    t: &Taxonomy,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<usize>> {
    let mut by_class: std::collections::BTreeMap<(LabelId, LabelId), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let child = r.child_label.expect("train records are labeled");
        let parent = t.parent_of(child).expect("valid child");
        by_class.entry((parent, child)).or_default().push(i);
    }
    let mut queues: Vec<ClassQueue> = by_class
        .into_iter()
        .map(|((parent, child), items)| ClassQueue { parent, child, items })
        .collect();
    for q in &mut queues {
        shuffle(&mut q.items, rng);
    }
    shuffle(&mut queues, rng);

    let mut batches = Vec::new();
    loop {
        let remaining: usize = queues.iter().map(|q| q.items.len()).sum();
        if remaining == 0 {
            break;
        }
        let mut batch: Vec<usize> = Vec::with_capacity(batch_size.min(remaining));

        // seed the batch with two child classes of one parent when possible
        if batch_size >= 2 {
            let mut best: Option<(usize, LabelId)> = None; // (remaining, parent)
            let mut parents: std::collections::BTreeMap<LabelId, (usize, usize)> =
                std::collections::BTreeMap::new();
            for q in &queues {
                if q.items.is_empty() {
                    continue;
                }
                let e = parents.entry(q.parent).or_insert((0, 0));
                e.0 += q.items.len();
                e.1 += 1;
            }
            for (&parent, &(count, classes)) in &parents {
                if classes >= 2 && best.map(|(c, _)| count > c).unwrap_or(true) {
                    best = Some((count, parent));
                }
            }
            if let Some((_, parent)) = best {
                for _ in 0..2 {
                    let pick = queues
                        .iter_mut()
                        .filter(|q| q.parent == parent && !q.items.is_empty())
                        .filter(|q| {
                            !batch.iter().any(|&i| records[i].child_label == Some(q.child))
                        })
                        .max_by(|a, b| {
                            a.items.len().cmp(&b.items.len()).then(b.child.cmp(&a.child))
                        });
                    if let Some(q) = pick {
                        batch.push(q.items.pop().expect("non-empty queue"));
                    }
                }
            }
        }

        let mut cursor = 0;
        while batch.len() < batch_size {
            let mut advanced = false;
            for offset in 0..queues.len() {
                let idx = (cursor + offset) % queues.len();
                if let Some(item) = queues[idx].items.pop() {
                    batch.push(item);
                    cursor = idx + 1;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
        batches.push(batch);
    }
    batches
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Loss nodes for one batch, built on a fresh tape.
struct BatchTape {
    tape: Tape,
    leaves: ParamNodes,
    total: NodeId,
    cls: f64,
    intra: f64,
    inter: f64,
}

fn build_batch_loss(
    params: &ModelParams,
    t: &Taxonomy,
    g: &LabelGraph,
    batch: &[&QueryRecord],
    weights: &LossWeights,
    source: &EmbeddingSource,
    trainable: bool,
) -> Result<BatchTape, TrainError> {
    let gold: Vec<LabelId> = batch
        .iter()
        .map(|r| r.child_label.ok_or_else(|| TrainError::UnlabeledRecord(r.id.clone())))
        .collect::<Result<_, _>>()?;
    let parents: Vec<LabelId> = gold
        .iter()
        .map(|&c| t.parent_of(c).map_err(|e| TrainError::Model(e.into())))
        .collect::<Result<_, _>>()?;

    let mut tape = Tape::new();
    let leaves = ParamNodes::install(&mut tape, params, trainable, source.is_builtin());
    let features = query_features(params, source, batch)?;
    let emb_q = install_query_node(&mut tape, &leaves, features);
    let fw = build_forward(&mut tape, &leaves, params, g, emb_q);

    let (pos, neg) = bce_coefficients(&gold, t, weights.lambda, params.head_dim())?;
    let cls_node = tape.log_loss(fw.probs, pos, neg, PROB_CLAMP);
    let cls = tape.scalar(cls_node);

    let (total, intra, inter) = if weights.w_contrastive > 0.0 && batch.len() >= 2 {
        let normed = tape.normalize_rows(fw.emb_f);
        let sims = tape.matmul_tb(normed, normed);
        let intra_anchors =
            contrastive_anchors(&gold, &parents, ContrastLevel::Intra, weights.literal_contrastive);
        let inter_anchors =
            contrastive_anchors(&gold, &parents, ContrastLevel::Inter, weights.literal_contrastive);
        let intra_node = tape.info_nce(sims, intra_anchors, weights.tau);
        let inter_node = tape.info_nce(sims, inter_anchors, weights.tau);
        let intra = tape.scalar(intra_node);
        let inter = tape.scalar(inter_node);
        let total = tape.lincomb(vec![
            (cls_node, 1.0 - weights.w_contrastive),
            (intra_node, weights.w_contrastive * weights.w_intra),
            (inter_node, weights.w_contrastive * (1.0 - weights.w_intra)),
        ]);
        (total, intra, inter)
    } else {
        let total = tape.lincomb(vec![(cls_node, 1.0 - weights.w_contrastive)]);
        (total, 0.0, 0.0)
    };
    Ok(BatchTape { tape, leaves, total, cls, intra, inter })
}

/// Parameter groups in fixed update order.
enum Group {
    Table,
    GcnW1,
    GcnW2,
    AlignW,
    HeadW,
    HeadB,
}

impl Group {
    fn active(params: &ModelParams, source: &EmbeddingSource) -> Vec<Group> {
        let mut groups = Vec::new();
        if source.is_builtin() {
            groups.push(Group::Table);
        }
        if params.fuse_labels {
            groups.push(Group::GcnW1);
            groups.push(Group::GcnW2);
            groups.push(Group::AlignW);
        }
        groups.push(Group::HeadW);
        groups.push(Group::HeadB);
        groups
    }

    fn node(&self, leaves: &ParamNodes) -> NodeId {
        match self {
            Group::Table => leaves.table,
            Group::GcnW1 => leaves.gcn_w1,
            Group::GcnW2 => leaves.gcn_w2,
            Group::AlignW => leaves.align_w,
            Group::HeadW => leaves.head_w,
            Group::HeadB => leaves.head_b,
        }
    }

    fn tensor<'a>(&self, params: &'a mut ModelParams) -> &'a mut Mat {
        match self {
            Group::Table => &mut params.encoder.table,
            Group::GcnW1 => &mut params.gcn_w1,
            Group::GcnW2 => &mut params.gcn_w2,
            Group::AlignW => &mut params.align_w,
            Group::HeadW => &mut params.head_w,
            Group::HeadB => &mut params.head_b,
        }
    }
}

fn validation_stats(
    params: &ModelParams,
    t: &Taxonomy,
    g: &LabelGraph,
    validation: &[QueryRecord],
    source: &EmbeddingSource,
) -> Result<(f64, f64, f64, f64), TrainError> {
    if validation.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let refs: Vec<&QueryRecord> = validation.iter().collect();
    let preds = predict_batch(&refs, g, t, params, source)?;
    let gold: Vec<LabelId> = validation.iter().map(|r| r.child_label.expect("labeled")).collect();
    let result = micro_macro_f1(&gold, &preds, t).map_err(|_| TrainError::ShapeMismatch)?;
    Ok((
        result.child_micro_f1,
        result.child_macro_f1,
        result.parent_micro_f1,
        result.parent_macro_f1,
    ))
}

/// Trains the model on the split's train set, tracking validation Macro-F1;
/// returns the parameters from the best validation epoch (the final epoch
/// when validation is empty).
pub fn train(
    split: &CorpusSplit,
    t: &Taxonomy,
    g: &LabelGraph,
    init: &ModelParams,
    cfg: &TrainConfig,
    source: &EmbeddingSource,
) -> Result<(ModelParams, TrainReport), TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    init.validate(t, g)?;
    let mut params = init.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let groups = Group::active(&params, source);
    let mut moments: Vec<AdamMoments> = groups
        .iter()
        .map(|grp| {
            let m = match grp {
                Group::Table => &params.encoder.table,
                Group::GcnW1 => &params.gcn_w1,
                Group::GcnW2 => &params.gcn_w2,
                Group::AlignW => &params.align_w,
                Group::HeadW => &params.head_w,
                Group::HeadB => &params.head_b,
            };
            AdamMoments::like(m)
        })
        .collect();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 1..=cfg.epochs {
        let batches = assemble_batches(&split.train, t, cfg.batch_size, &mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0); // total, cls, intra, inter
        let mut count = 0usize;
        for (batch_no, batch_idx) in batches.iter().enumerate() {
            let batch: Vec<&QueryRecord> = batch_idx.iter().map(|&i| &split.train[i]).collect();
            let bt = build_batch_loss(&params, t, g, &batch, &cfg.weights, source, true)?;
            let total = bt.tape.scalar(bt.total);
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            let grads = bt.tape.backward(bt.total);
            for (grp, state) in groups.iter().zip(moments.iter_mut()) {
                let node = grp.node(&bt.leaves);
                match grads.get(node) {
                    Some(grad) => adam_step(grp.tensor(&mut params), grad, state, cfg)?,
                    None => {
                        let zero = Mat::zeros(state.m.rows(), state.m.cols());
                        adam_step(grp.tensor(&mut params), &zero, state, cfg)?;
                    }
                }
            }
            params.revision += 1;
            let w = batch.len() as f64;
            sums.0 += total * w;
            sums.1 += bt.cls * w;
            sums.2 += bt.intra * w;
            sums.3 += bt.inter * w;
            count += batch.len();
        }

        let (vmic, vmac, pmic, pmac) =
            validation_stats(&params, t, g, &split.validation, source)?;
        let n = count as f64;
        report.epochs.push(EpochStats {
            epoch,
            loss_total: sums.0 / n,
            loss_classification: sums.1 / n,
            loss_intra: sums.2 / n,
            loss_inter: sums.3 / n,
            val_child_micro_f1: vmic,
            val_child_macro_f1: vmac,
            val_parent_micro_f1: pmic,
            val_parent_macro_f1: pmac,
        });
        report.stopped_epoch = epoch;

        if split.validation.is_empty() {
            continue;
        }
        let improved = best.as_ref().map(|(b, _, _)| vmac > *b).unwrap_or(true);
        if improved {
            best = Some((vmac, epoch, params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }

    match best {
        Some((_, epoch, best_params)) => {
            report.best_epoch = epoch;
            Ok((best_params, report))
        }
        None => {
            report.best_epoch = report.stopped_epoch;
            Ok((params, report))
        }
    }
}

/// Combined loss of one batch at the given parameters (no gradient).
pub fn batch_loss(
    params: &ModelParams,
    t: &Taxonomy,
    g: &LabelGraph,
    batch: &[&QueryRecord],
    weights: &LossWeights,
    source: &EmbeddingSource,
) -> Result<f64, TrainError> {
    let bt = build_batch_loss(params, t, g, batch, weights, source, false)?;
    Ok(bt.tape.scalar(bt.total))
}

/// Central finite-difference check of the analytic gradients over every
/// active parameter group; returns the max relative error. For the bucket
/// table only rows referenced by the batch are differenced (untouched rows
/// have identically zero gradient on both routes).
pub fn grad_check(
    params: &ModelParams,
    batch: &[&QueryRecord],
    t: &Taxonomy,
    g: &LabelGraph,
    cfg: &TrainConfig,
    step: f64,
) -> Result<f64, TrainError> {
    let bt = build_batch_loss(params, t, g, batch, &cfg.weights, source_builtin(), true)?;
    let grads = bt.tape.backward(bt.total);
    let groups = Group::active(params, source_builtin());

    let mut touched_rows: Vec<usize> = Vec::new();
    for r in batch {
        let counts = params.encoder.bucket_counts(&r.text).map_err(ModelError::from)?;
        for (&bucket, _) in counts.iter() {
            touched_rows.push(bucket);
        }
    }
    touched_rows.sort_unstable();
    touched_rows.dedup();

    let mut max_err = 0.0f64;
    let mut scratch = params.clone();
    for grp in &groups {
        let node = grp.node(&bt.leaves);
        let analytic = match grads.get(node) {
            Some(g) => g.clone(),
            None => continue,
        };
        let (rows, cols) = (analytic.rows(), analytic.cols());
        let coords: Vec<(usize, usize)> = match grp {
            Group::Table => touched_rows
                .iter()
                .flat_map(|&r| (0..cols).map(move |c| (r, c)))
                .collect(),
            _ => (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
        };
        for (r, c) in coords {
            let orig = grp.tensor(&mut scratch).at(r, c);
            grp.tensor(&mut scratch).set(r, c, orig + step);
            let up = batch_loss(&scratch, t, g, batch, &cfg.weights, source_builtin())?;
            grp.tensor(&mut scratch).set(r, c, orig - step);
            let down = batch_loss(&scratch, t, g, batch, &cfg.weights, source_builtin())?;
            grp.tensor(&mut scratch).set(r, c, orig);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.at(r, c);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

fn source_builtin() -> &'static EmbeddingSource<'static> {
    &EmbeddingSource::Builtin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, split, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::taxonomy::build_label_graph;

    fn toy_setup() -> (Taxonomy, LabelGraph, ModelParams) {
        let t = Taxonomy::from_pairs(&[("alpha", vec!["a1", "a2"]), ("beta", vec!["b1", "b2"])])
            .unwrap();
        let g = build_label_graph(&t);
        let cfg = ModelConfig { d_q: 8, d_h: 4, d_g: 4, buckets: 1024, ..ModelConfig::default() };
        let params = ModelParams::init(&t, &cfg, 3).unwrap();
        (t, g, params)
    }

    fn toy_batch(t: &Taxonomy) -> Vec<QueryRecord> {
        vec![
            QueryRecord::labeled("q1", "red drill bits", t.id_of("a1").unwrap()),
            QueryRecord::labeled("q2", "drill set pro", t.id_of("a1").unwrap()),
            QueryRecord::labeled("q3", "wood saw blade", t.id_of("a2").unwrap()),
            QueryRecord::labeled("q4", "garden hose reel", t.id_of("b1").unwrap()),
            QueryRecord::labeled("q5", "lawn mower part", t.id_of("b2").unwrap()),
        ]
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_with_decaying_moments() {
        let mut p = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let mut state = AdamMoments::like(&p);
        state.m = Mat::from_vec(1, 3, vec![0.4, 0.4, 0.4]);
        state.v = Mat::from_vec(1, 3, vec![0.2, 0.2, 0.2]);
        let before = p.clone();
        let m_before = state.m.clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        adam_step(&mut p, &Mat::zeros(1, 3), &mut state, &cfg).unwrap();
        assert_eq!(p, before);
        for (after, before) in state.m.as_slice().iter().zip(m_before.as_slice()) {
            assert!(after.abs() < before.abs());
        }
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        let mut p = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let mut state = AdamMoments::like(&p);
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let grad = Mat::from_vec(1, 2, vec![3.0, -0.004]);
        adam_step(&mut p, &grad, &mut state, &cfg).unwrap();
        for (updated, &g) in p.as_slice().iter().zip(grad.as_slice()) {
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
            assert!((updated - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_adam() {
        let cfg = TrainConfig { learning_rate: 0.05, ..TrainConfig::default() };
        let g1 = 0.7;
        let g2 = -0.3;
        let mut p = Mat::from_vec(1, 1, vec![1.0]);
        let mut state = AdamMoments::like(&p);
        adam_step(&mut p, &Mat::from_vec(1, 1, vec![g1]), &mut state, &cfg).unwrap();
        adam_step(&mut p, &Mat::from_vec(1, 1, vec![g2]), &mut state, &cfg).unwrap();

        // hand-unrolled trace
        let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate);
        let mut theta = 1.0;
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        theta -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        theta -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.at(0, 0) - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Mat::zeros(2, 2);
        let mut state = AdamMoments::like(&p);
        let bad = Mat::zeros(1, 2);
        assert!(matches!(
            adam_step(&mut p, &bad, &mut state, &TrainConfig::default()),
            Err(TrainError::ShapeMismatch)
        ));
    }

    #[test]
    fn zero_learning_rate_returns_init_exactly() {
        let (t, g, params) = toy_setup();
        let records = toy_batch(&t);
        let split = CorpusSplit { train: records, ..CorpusSplit::default() };
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, batch_size: 4, ..TrainConfig::default() };
        let (out, report) = train(&split, &t, &g, &params, &cfg, &EmbeddingSource::Builtin).unwrap();
        // revision advances but every tensor is bit-identical
        assert_eq!(out.encoder.table, params.encoder.table);
        assert_eq!(out.gcn_w1, params.gcn_w1);
        assert_eq!(out.gcn_w2, params.gcn_w2);
        assert_eq!(out.align_w, params.align_w);
        assert_eq!(out.head_w, params.head_w);
        assert_eq!(out.head_b, params.head_b);
        assert_eq!(report.stopped_epoch, 1);
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let (t, g, params) = toy_setup();
        let records = toy_batch(&t);
        let full = split(records, 5, (0.6, 0.2, 0.2)).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 3, learning_rate: 0.05, ..TrainConfig::default() };
        let (p1, r1) = train(&full, &t, &g, &params, &cfg, &EmbeddingSource::Builtin).unwrap();
        let (p2, r2) = train(&full, &t, &g, &params, &cfg, &EmbeddingSource::Builtin).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn separable_corpus_trains_to_high_accuracy() {
        let corpus = gen_synthetic(&SyntheticConfig {
            seed: 17,
            parents: 2,
            children_per_parent: 1,
            queries_per_child: 40,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let t = corpus.taxonomy.clone();
        let g = build_label_graph(&t);
        let full = split(corpus.records, 2, (0.8, 0.1, 0.1)).unwrap();
        let cfg = ModelConfig { d_q: 16, d_h: 8, d_g: 8, buckets: 1024, ..ModelConfig::default() };
        let params = ModelParams::init(&t, &cfg, 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let (trained, report) = train(&full, &t, &g, &params, &tcfg, &EmbeddingSource::Builtin).unwrap();
        for w in report.epochs.windows(2).take(4) {
            assert!(
                w[1].loss_total < w[0].loss_total,
                "loss did not decrease: {} -> {}",
                w[0].loss_total,
                w[1].loss_total
            );
        }
        let refs: Vec<&QueryRecord> = full.train.iter().collect();
        let preds = predict_batch(&refs, &g, &t, &trained, &EmbeddingSource::Builtin).unwrap();
        let gold: Vec<LabelId> = full.train.iter().map(|r| r.child_label.unwrap()).collect();
        let result = micro_macro_f1(&gold, &preds, &t).unwrap();
        assert!(result.child_micro_f1 >= 0.95, "micro {}", result.child_micro_f1);
    }

    #[test]
    fn batches_pair_sibling_classes_when_possible() {
        let (t, _, _) = toy_setup();
        let mut records = Vec::new();
        for (i, name) in ["a1", "a2", "b1", "b2"].iter().enumerate() {
            for j in 0..6 {
                records.push(QueryRecord::labeled(
                    format!("q{i}{j}"),
                    format!("text {i} {j}"),
                    t.id_of(name).unwrap(),
                ));
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..5 {
            let batches = assemble_batches(&records, &t, 6, &mut rng);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..records.len()).collect::<Vec<_>>());
            for batch in &batches {
                if batch.len() < 2 {
                    continue;
                }
                let mut pairs = std::collections::BTreeMap::new();
                for &i in batch {
                    let child = records[i].child_label.unwrap();
                    let parent = t.parent_of(child).unwrap();
                    pairs.entry(parent).or_insert_with(std::collections::BTreeSet::new).insert(child);
                }
                assert!(
                    pairs.values().any(|cs| cs.len() >= 2),
                    "batch lacks sibling classes: {batch:?}"
                );
            }
        }
    }

    #[test]
    fn grad_check_passes_on_toy_model() {
        let (t, g, params) = toy_setup();
        let records = toy_batch(&t);
        let batch: Vec<&QueryRecord> = records.iter().collect();
        let cfg = TrainConfig::default();
        let err = grad_check(&params, &batch, &t, &g, &cfg, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_error_grows_with_step() {
        let (t, g, params) = toy_setup();
        let records = toy_batch(&t);
        let batch: Vec<&QueryRecord> = records.iter().collect();
        let cfg = TrainConfig::default();
        let small = grad_check(&params, &batch, &t, &g, &cfg, 1e-4).unwrap();
        let large = grad_check(&params, &batch, &t, &g, &cfg, 2e-3).unwrap();
        assert!(
            large > small,
            "central differences should degrade with step: {small} vs {large}"
        );
    }

    #[test]
    fn contrastive_free_config_confines_gradients_to_classification_path() {
        let (t, g, params) = toy_setup();
        let records = toy_batch(&t);
        let batch: Vec<&QueryRecord> = records.iter().collect();
        let weights = LossWeights { w_contrastive: 0.0, lambda: 0.0, ..LossWeights::default() };
        let bt = build_batch_loss(&params, &t, &g, &batch, &weights, &EmbeddingSource::Builtin, true).unwrap();
        let total = bt.tape.scalar(bt.total);
        let cls = bt.cls;
        assert!((total - cls).abs() < 1e-15);
        assert_eq!(bt.intra, 0.0);
        assert_eq!(bt.inter, 0.0);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let (t, g, params) = toy_setup();
        let empty = CorpusSplit::default();
        assert!(matches!(
            train(&empty, &t, &g, &params, &TrainConfig::default(), &EmbeddingSource::Builtin),
            Err(TrainError::EmptyTrainSet)
        ));
    }

    #[test]
    fn updates_stay_finite_across_random_batches() {
        let (t, g, params) = toy_setup();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let children = t.children().to_vec();
        let mut params = params;
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let groups = Group::active(&params, &EmbeddingSource::Builtin);
        let mut moments: Vec<AdamMoments> = vec![
            AdamMoments::like(&params.encoder.table),
            AdamMoments::like(&params.gcn_w1),
            AdamMoments::like(&params.gcn_w2),
            AdamMoments::like(&params.align_w),
            AdamMoments::like(&params.head_w),
            AdamMoments::like(&params.head_b),
        ];
        for round in 0..100 {
            let batch: Vec<QueryRecord> = (0..4)
                .map(|i| {
                    let len = rng.gen_range(1..=4usize);
                    let text: String = (0..len)
                        .map(|_| format!("w{}", rng.gen_range(0..50u32)))
                        .collect::<Vec<_>>()
                        .join(" ");
                    QueryRecord::labeled(
                        format!("r{round}i{i}"),
                        text,
                        children[rng.gen_range(0..children.len())],
                    )
                })
                .collect();
            let refs: Vec<&QueryRecord> = batch.iter().collect();
            let bt = build_batch_loss(&params, &t, &g, &refs, &cfg.weights, &EmbeddingSource::Builtin, true)
                .unwrap();
            assert!(bt.tape.scalar(bt.total).is_finite());
            let grads = bt.tape.backward(bt.total);
            for (grp, state) in groups.iter().zip(moments.iter_mut()) {
                if let Some(grad) = grads.get(grp.node(&bt.leaves)) {
                    adam_step(grp.tensor(&mut params), grad, state, &cfg).unwrap();
                }
            }
            for m in [
                &params.encoder.table,
                &params.gcn_w1,
                &params.gcn_w2,
                &params.align_w,
                &params.head_w,
                &params.head_b,
            ] {
                assert!(m.all_finite(), "non-finite parameters after round {round}");
            }
        }
    }
}

//! Training objectives: hierarchy-aware classification loss, intra-/inter-
//! class contrastive losses over fused embeddings, and their weighted mix.

use serde::{Deserialize, Serialize};

use crate::math::Mat;
use crate::model::head_index;
use crate::tape::{info_nce_value, Anchor};
use crate::taxonomy::{LabelId, Taxonomy};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("label `{0}` is not a child category")]
    UnknownLabel(String),
    #[error("batch sizes do not match")]
    LengthMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Sibling-reward weight in the classification loss.
    pub lambda: f64,
    /// Intra-class share inside the contrastive mix.
    pub w_intra: f64,
    /// Contrastive share of the total loss.
    pub w_contrastive: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Swap positive/negative roles, reproducing the orientation with the
    /// negative pair in the numerator.
    pub literal_contrastive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            w_intra: 0.9,
            w_contrastive: 0.1,
            tau: 0.5,
            literal_contrastive: false,
        }
    }
}

/// Target coefficient matrices for the classification loss: `pos` carries 1
/// on the gold child and its parent plus `lambda` on the gold child's
/// siblings; `neg` carries 1 wherever the gold vector is 0.
pub(crate) fn bce_coefficients(
    gold: &[LabelId],
    t: &Taxonomy,
    lambda: f64,
    head_dim: usize,
) -> Result<(Mat, Mat), LossError> {
    let mut pos = Mat::zeros(gold.len(), head_dim);
    let mut neg = Mat::from_fn(gold.len(), head_dim, |_, _| 1.0);
    for (i, &child) in gold.iter().enumerate() {
        if !t.is_child(child) {
            return Err(LossError::UnknownLabel(format!("#{}", child.0)));
        }
        let parent = t.parent_of(child).expect("children have parents");
        for label in [child, parent] {
            let idx = head_index(t, label);
            pos.set(i, idx, 1.0);
            neg.set(i, idx, 0.0);
        }
        for sib in t.siblings(child).expect("valid child") {
            let idx = head_index(t, sib);
            pos.set(i, idx, pos.at(i, idx) + lambda);
        }
    }
    Ok((pos, neg))
}

/// Hierarchy-aware classification loss, minimized form: mean over the batch
/// of the per-label binary cross entropy (gold child and its parent marked
/// positive) minus `lambda` times the log-likelihood of the gold child's
/// siblings. `probs` rows follow the head layout (parents then children).
pub fn classification_loss(
    probs: &Mat,
    gold: &[LabelId],
    t: &Taxonomy,
    w: &LossWeights,
) -> Result<f64, LossError> {
    if probs.rows() != gold.len() {
        return Err(LossError::LengthMismatch);
    }
    let (pos, neg) = bce_coefficients(gold, t, w.lambda, probs.cols())?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        for ((&p, &wp), &wn) in probs.row(i).iter().zip(pos.row(i).iter()).zip(neg.row(i).iter()) {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= wp * p.ln() + wn * (1.0 - p).ln();
        }
    }
    Ok(total / probs.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastLevel {
    /// Positives share the child class; negatives share the parent but not
    /// the child.
    Intra,
    /// Positives share the parent but not the child; negatives come from
    /// other parents.
    Inter,
}

/// Anchor lists for a batch. With `literal` set, positive and negative roles
/// are exchanged.
pub(crate) fn contrastive_anchors(
    child: &[LabelId],
    parent: &[LabelId],
    level: ContrastLevel,
    literal: bool,
) -> Vec<Anchor> {
    assert_eq!(child.len(), parent.len());
    let n = child.len();
    let mut anchors = Vec::with_capacity(n);
    for a in 0..n {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for j in 0..n {
            if j == a {
                continue;
            }
            let same_child = child[j] == child[a];
            let same_parent = parent[j] == parent[a];
            let is_pos = match level {
                ContrastLevel::Intra => same_child,
                ContrastLevel::Inter => same_parent && !same_child,
            };
            let is_neg = match level {
                ContrastLevel::Intra => same_parent && !same_child,
                ContrastLevel::Inter => !same_parent,
            };
            if is_pos {
                positives.push(j);
            } else if is_neg {
                negatives.push(j);
            }
        }
        if literal {
            std::mem::swap(&mut positives, &mut negatives);
        }
        anchors.push(Anchor { anchor: a, positives, negatives });
    }
    anchors
}

/// All-pairs cosine similarity, computed exactly as the training tape does
/// (row normalization then `N·Nᵀ`).
pub(crate) fn cosine_matrix(embs: &Mat) -> Mat {
    let mut normed = embs.clone();
    for i in 0..normed.rows() {
        let row = normed.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    normed.matmul_tb(&normed)
}

fn contrastive_loss(
    embs: &Mat,
    child: &[LabelId],
    parent: &[LabelId],
    tau: f64,
    level: ContrastLevel,
    literal: bool,
) -> f64 {
    assert_eq!(embs.rows(), child.len(), "embedding batch and labels must align");
    if embs.rows() < 2 {
        return 0.0;
    }
    let sims = cosine_matrix(embs);
    let anchors = contrastive_anchors(child, parent, level, literal);
    info_nce_value(&sims, &anchors, tau)
}

/// Contrastive loss over same-child positives vs same-parent/different-child
/// negatives; 0 when no anchor has both.
pub fn intra_class_loss(embs: &Mat, child: &[LabelId], parent: &[LabelId], tau: f64) -> f64 {
    contrastive_loss(embs, child, parent, tau, ContrastLevel::Intra, false)
}

/// Contrastive loss over same-parent/different-child positives vs
/// different-parent negatives; 0 when no anchor has both.
pub fn inter_class_loss(embs: &Mat, child: &[LabelId], parent: &[LabelId], tau: f64) -> f64 {
    contrastive_loss(embs, child, parent, tau, ContrastLevel::Inter, false)
}

/// Literal-orientation variants, for comparison experiments.
pub fn intra_class_loss_literal(embs: &Mat, child: &[LabelId], parent: &[LabelId], tau: f64) -> f64 {
    contrastive_loss(embs, child, parent, tau, ContrastLevel::Intra, true)
}

pub fn inter_class_loss_literal(embs: &Mat, child: &[LabelId], parent: &[LabelId], tau: f64) -> f64 {
    contrastive_loss(embs, child, parent, tau, ContrastLevel::Inter, true)
}

/// `w_contrastive · (w_intra·intra + (1-w_intra)·inter) + (1-w_contrastive)·cls`
pub fn combined_loss(cls: f64, intra: f64, inter: f64, w: &LossWeights) -> f64 {
    let contrastive = w.w_intra * intra + (1.0 - w.w_intra) * inter;
    w.w_contrastive * contrastive + (1.0 - w.w_contrastive) * cls
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pair_taxonomy() -> Taxonomy {
        Taxonomy::from_pairs(&[("p", vec!["c"])]).unwrap()
    }

    #[test]
    fn bce_hand_case() {
        // one parent + one child, both gold, both predicted at 0.8
        let t = single_pair_taxonomy();
        let c = t.id_of("c").unwrap();
        let probs = Mat::from_vec(1, 2, vec![0.8, 0.8]);
        let loss = classification_loss(&probs, &[c], &t, &LossWeights::default()).unwrap();
        assert!((loss - 0.4463).abs() < 1e-4);
        assert!((loss + 2.0 * 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let t = single_pair_taxonomy();
        let c = t.id_of("c").unwrap();
        let probs = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let loss = classification_loss(&probs, &[c], &t, &LossWeights::default()).unwrap();
        assert!(loss >= 0.0 && loss < 1e-5);
    }

    /// Straightforward per-label BCE, written independently of the library
    /// path.
    fn bce_oracle(probs: &Mat, gold_rows: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (i, gold) in gold_rows.iter().enumerate() {
            for (&p, &y) in probs.row(i).iter().zip(gold.iter()) {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        total / probs.rows() as f64
    }

    #[test]
    fn lambda_zero_matches_independent_bce() {
        let t = Taxonomy::from_pairs(&[("p", vec!["a", "b"]), ("q", vec!["z"])]).unwrap();
        let (a, z) = (t.id_of("a").unwrap(), t.id_of("z").unwrap());
        let probs = Mat::from_vec(
            2,
            5,
            vec![0.7, 0.2, 0.9, 0.1, 0.4, 0.3, 0.8, 0.2, 0.6, 0.95],
        );
        let w = LossWeights { lambda: 0.0, ..LossWeights::default() };
        let loss = classification_loss(&probs, &[a, z], &t, &w).unwrap();

        let mut gold_rows = vec![vec![0.0; 5]; 2];
        gold_rows[0][head_index(&t, a)] = 1.0;
        gold_rows[0][head_index(&t, t.parent_of(a).unwrap())] = 1.0;
        gold_rows[1][head_index(&t, z)] = 1.0;
        gold_rows[1][head_index(&t, t.parent_of(z).unwrap())] = 1.0;
        assert!((loss - bce_oracle(&probs, &gold_rows)).abs() < 1e-12);
    }

    fn pair_and_negative() -> (Mat, Vec<LabelId>, Vec<LabelId>) {
        // anchor/positive cosine 1, negative cosine 0
        let embs = Mat::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let child = vec![LabelId(10), LabelId(10), LabelId(11)];
        let parent = vec![LabelId(1), LabelId(1), LabelId(1)];
        (embs, child, parent)
    }

    #[test]
    fn intra_hand_case_is_0_1269() {
        let (embs, child, parent) = pair_and_negative();
        let loss = intra_class_loss(&embs, &child, &parent, 0.5);
        assert!((loss - 0.1269).abs() < 1e-4, "got {loss}");
    }

    #[test]
    fn inter_hand_case_is_0_1269() {
        // positives: same parent, different child; negative: other parent
        let embs = Mat::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let child = vec![LabelId(10), LabelId(11), LabelId(12)];
        let parent = vec![LabelId(1), LabelId(1), LabelId(2)];
        let loss = inter_class_loss(&embs, &child, &parent, 0.5);
        assert!((loss - 0.1269).abs() < 1e-4, "got {loss}");
    }

    #[test]
    fn identical_embeddings_reduce_to_log_one_plus_n() {
        let embs = Mat::from_vec(3, 2, vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
        let child = vec![LabelId(10), LabelId(10), LabelId(11)];
        let parent = vec![LabelId(1), LabelId(1), LabelId(1)];
        let loss = intra_class_loss(&embs, &child, &parent, 0.5);
        assert!((loss - 2f64.ln()).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn degenerate_batches_yield_zero() {
        let embs = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // single child class: no intra negatives
        let loss = intra_class_loss(
            &embs,
            &[LabelId(5), LabelId(5)],
            &[LabelId(1), LabelId(1)],
            0.5,
        );
        assert_eq!(loss, 0.0);
        // single parent: no inter negatives
        let loss = inter_class_loss(
            &embs,
            &[LabelId(5), LabelId(6)],
            &[LabelId(1), LabelId(1)],
            0.5,
        );
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let embs = Mat::from_vec(4, 3, vec![
            0.2, -0.4, 0.9, 0.8, 0.8, 0.1, -0.3, 0.5, 0.2, 0.6, -0.6, 0.6,
        ]);
        let child = vec![LabelId(10), LabelId(10), LabelId(11), LabelId(12)];
        let parent = vec![LabelId(1), LabelId(1), LabelId(1), LabelId(2)];
        let a = inter_class_loss(&embs, &child, &parent, 0.5);
        let b = inter_class_loss(&embs.scale(5.0), &child, &parent, 0.5);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn intra_loss_decreases_as_positive_similarity_rises() {
        // 3-d construction keeps every other pairwise similarity fixed
        let child = vec![LabelId(10), LabelId(10), LabelId(11)];
        let parent = vec![LabelId(1), LabelId(1), LabelId(1)];
        let losses: Vec<f64> = [0.3, 0.6, 0.9]
            .iter()
            .map(|&x: &f64| {
                let embs = Mat::from_vec(
                    3,
                    3,
                    vec![1.0, 0.0, 0.0, x, 0.0, (1.0 - x * x).sqrt(), 0.0, 1.0, 0.0],
                );
                intra_class_loss(&embs, &child, &parent, 0.5)
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn literal_orientation_swaps_roles() {
        let (embs, child, parent) = pair_and_negative();
        let standard = intra_class_loss(&embs, &child, &parent, 0.5);
        let literal = intra_class_loss_literal(&embs, &child, &parent, 0.5);
        // the literal form puts the far pair in the numerator, so it scores
        // worse than the standard orientation on a well-separated batch
        assert!(literal > standard);
        let e2 = 2f64.exp();
        let expected = -(1.0 / (1.0 + e2)).ln();
        assert!((literal - expected).abs() < 1e-9);
    }

    #[test]
    fn combined_loss_weights_components() {
        let w = LossWeights::default();
        assert_eq!(
            combined_loss(3.0, 7.0, 9.0, &LossWeights { w_contrastive: 0.0, ..w.clone() }),
            3.0
        );
        let only_intra = LossWeights { w_intra: 1.0, ..w.clone() };
        assert_eq!(
            combined_loss(1.0, 2.0, 100.0, &only_intra),
            combined_loss(1.0, 2.0, -55.0, &only_intra)
        );
        let v = combined_loss(1.0, 2.0, 4.0, &w);
        assert!((v - 1.12).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_linear_in_each_component() {
        let w = LossWeights { w_intra: 0.3, w_contrastive: 0.25, ..LossWeights::default() };
        let base = combined_loss(1.0, 1.0, 1.0, &w);
        let d_cls = combined_loss(2.0, 1.0, 1.0, &w) - base;
        let d_intra = combined_loss(1.0, 2.0, 1.0, &w) - base;
        let d_inter = combined_loss(1.0, 1.0, 2.0, &w) - base;
        let predicted = base + 3.0 * d_cls + 2.0 * d_intra - d_inter;
        let direct = combined_loss(4.0, 3.0, 0.0, &w);
        assert!((predicted - direct).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_finite_and_nonnegative() {
        let t = Taxonomy::from_pairs(&[("p", vec!["a", "b"])]).unwrap();
        let a = t.id_of("a").unwrap();
        let extremes = Mat::from_vec(1, 3, vec![0.0, 1.0, 0.5]);
        let loss = classification_loss(&extremes, &[a], &t, &LossWeights::default()).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }
}

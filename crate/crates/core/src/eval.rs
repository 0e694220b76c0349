//! Micro/Macro-F1 at child and parent level, plus the ablation harness that
//! trains pipeline variants under identical seeds.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, QueryRecord};
use crate::encoder::EmbeddingSource;
use crate::model::{predict_batch, ModelConfig, ModelError, ModelParams, Prediction};
use crate::selftrain::{selftrain_loop, RoundReport, SamplerConfig, SelfTrainError};
use crate::taxonomy::{LabelGraph, LabelId, Taxonomy};
use crate::trainer::{train, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold and prediction lists differ in length")]
    LengthMismatch,
    #[error("gold label `{0}` is not a child category")]
    NotAChild(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    SelfTrain(#[from] SelfTrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub level: Level,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Child,
    Parent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub child_micro_f1: f64,
    pub child_macro_f1: f64,
    pub parent_micro_f1: f64,
    pub parent_macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Per-class (TP, FP, FN) triples.
pub type ClassCounts = Vec<(usize, usize, usize)>;

fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Micro pools counts across classes; macro is the unweighted mean of
/// per-class F1, counting zero-support classes as F1 = 0.
pub fn f1_from_counts(counts: &ClassCounts) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut f1_sum = 0.0;
    for &(t, f, n) in counts {
        tp += t;
        fp += f;
        fn_ += n;
        f1_sum += precision_recall_f1(t, f, n).2;
    }
    let micro = precision_recall_f1(tp, fp, fn_).2;
    let macro_ = if counts.is_empty() { 0.0 } else { f1_sum / counts.len() as f64 };
    (micro, macro_)
}

fn level_counts(
    gold: &[usize],
    pred: &[usize],
    class_count: usize,
) -> ClassCounts {
    let mut counts = vec![(0usize, 0usize, 0usize); class_count];
    for (&g, &p) in gold.iter().zip(pred.iter()) {
        if g == p {
            counts[g].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[g].2 += 1;
        }
    }
    counts
}

/// Child- and parent-level Micro/Macro-F1 from argmax child predictions;
/// parent metrics use each side's derived parent.
pub fn micro_macro_f1(
    gold: &[LabelId],
    preds: &[Prediction],
    t: &Taxonomy,
) -> Result<EvalResult, EvalError> {
    if gold.len() != preds.len() {
        return Err(EvalError::LengthMismatch);
    }
    for &g in gold {
        if !t.is_child(g) {
            return Err(EvalError::NotAChild(format!("#{}", g.0)));
        }
    }
    let gold_child: Vec<usize> = gold.iter().map(|&g| t.child_position(g)).collect();
    let pred_child: Vec<usize> = preds.iter().map(|p| t.child_position(p.child)).collect();
    let child_counts = level_counts(&gold_child, &pred_child, t.children().len());

    let gold_parent: Vec<usize> = gold
        .iter()
        .map(|&g| t.parent_position(t.parent_of(g).expect("child has parent")))
        .collect();
    let pred_parent: Vec<usize> = preds.iter().map(|p| t.parent_position(p.parent)).collect();
    let parent_counts = level_counts(&gold_parent, &pred_parent, t.parents().len());

    let (child_micro_f1, child_macro_f1) = f1_from_counts(&child_counts);
    let (parent_micro_f1, parent_macro_f1) = f1_from_counts(&parent_counts);

    let mut per_class = Vec::with_capacity(child_counts.len() + parent_counts.len());
    for (pos, &(tp, fp, fn_)) in child_counts.iter().enumerate() {
        let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
        per_class.push(ClassMetrics {
            label: t.name(t.children()[pos]).to_string(),
            level: Level::Child,
            precision,
            recall,
            f1,
            support: tp + fn_,
        });
    }
    for (pos, &(tp, fp, fn_)) in parent_counts.iter().enumerate() {
        let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
        per_class.push(ClassMetrics {
            label: t.name(t.parents()[pos]).to_string(),
            level: Level::Parent,
            precision,
            recall,
            f1,
            support: tp + fn_,
        });
    }
    Ok(EvalResult { child_micro_f1, child_macro_f1, parent_micro_f1, parent_macro_f1, per_class })
}

/// Per-class table in TSV form: `level \t label \t precision \t recall \t f1 \t support`.
pub fn per_class_tsv(result: &EvalResult) -> String {
    let mut out = String::from("level\tlabel\tprecision\trecall\tf1\tsupport\n");
    for c in &result.per_class {
        let level = match c.level {
            Level::Child => "child",
            Level::Parent => "parent",
        };
        out.push_str(&format!(
            "{level}\t{}\t{}\t{}\t{}\t{}\n",
            c.label, c.precision, c.recall, c.f1, c.support
        ));
    }
    out
}

/// Everything a full pipeline run needs besides the data.
#[derive(Clone, Debug)]
pub struct PipelineSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub init_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Attention fusion bypassed; `emb_f` is the query embedding zero-padded.
    NoLabelHierarchy,
    /// `w_contrastive` forced to 0.
    NoInstanceHierarchy,
    /// Self-training budget forced to 0 (rounds degenerate to retraining).
    NoSelfTraining,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoLabelHierarchy,
        AblationVariant::NoInstanceHierarchy,
        AblationVariant::NoSelfTraining,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoLabelHierarchy => "no_label_hierarchy",
            AblationVariant::NoInstanceHierarchy => "no_instance_hierarchy",
            AblationVariant::NoSelfTraining => "no_self_training",
        }
    }

    /// Applies this variant's switch to a copy of the settings.
    pub fn apply(&self, settings: &PipelineSettings) -> PipelineSettings {
        let mut s = settings.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoLabelHierarchy => s.model.fuse_labels = false,
            AblationVariant::NoInstanceHierarchy => s.train.weights.w_contrastive = 0.0,
            AblationVariant::NoSelfTraining => s.sampler.budget = crate::selftrain::Budget::Count(0),
        }
        s
    }
}

/// Output of one full pipeline run: trained parameters, the initial training
/// report, and per-round self-training reports.
pub struct PipelineRun {
    pub params: ModelParams,
    pub train_report: TrainReport,
    pub rounds: Vec<RoundReport>,
}

/// Initial training followed by the self-training loop.
pub fn run_pipeline(
    split: &CorpusSplit,
    t: &Taxonomy,
    g: &LabelGraph,
    settings: &PipelineSettings,
    source: &EmbeddingSource,
) -> Result<PipelineRun, EvalError> {
    let init = ModelParams::init(t, &settings.model, settings.init_seed)?;
    let (params, train_report) = train(split, t, g, &init, &settings.train, source)?;
    let (params, rounds) =
        selftrain_loop(split, t, g, params, &settings.train, &settings.sampler, source)?;
    Ok(PipelineRun { params, train_report, rounds })
}

/// Evaluates trained parameters on the split's test set.
pub fn evaluate_on_test(
    split: &CorpusSplit,
    t: &Taxonomy,
    g: &LabelGraph,
    params: &ModelParams,
    source: &EmbeddingSource,
) -> Result<EvalResult, EvalError> {
    let refs: Vec<&QueryRecord> = split.test.iter().collect();
    let preds = predict_batch(&refs, g, t, params, source)?;
    let gold: Vec<LabelId> = split.test.iter().map(|r| r.child_label.expect("labeled")).collect();
    micro_macro_f1(&gold, &preds, t)
}

/// Runs every ablation variant under identical seeds and evaluates each on
/// the test set.
pub fn ablation_run(
    split: &CorpusSplit,
    t: &Taxonomy,
    g: &LabelGraph,
    settings: &PipelineSettings,
    source: &EmbeddingSource,
) -> Result<Vec<(AblationVariant, EvalResult)>, EvalError> {
    let mut out = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let s = variant.apply(settings);
        let run = run_pipeline(split, t, g, &s, source)?;
        out.push((variant, evaluate_on_test(split, t, g, &run.params, source)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxonomy() -> Taxonomy {
        Taxonomy::from_pairs(&[("p", vec!["a", "b"]), ("q", vec!["c"])]).unwrap()
    }

    fn pred_for(t: &Taxonomy, child: &str) -> Prediction {
        let c = t.id_of(child).unwrap();
        let mut probs = vec![0.1; t.parents().len() + t.children().len()];
        probs[t.parents().len() + t.child_position(c)] = 0.9;
        Prediction { probs, child: c, parent: t.parent_of(c).unwrap() }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let t = taxonomy();
        let gold = vec![t.id_of("a").unwrap(), t.id_of("b").unwrap(), t.id_of("c").unwrap()];
        let preds = vec![pred_for(&t, "a"), pred_for(&t, "b"), pred_for(&t, "c")];
        let r = micro_macro_f1(&gold, &preds, &t).unwrap();
        assert_eq!(r.child_micro_f1, 1.0);
        assert_eq!(r.child_macro_f1, 1.0);
        assert_eq!(r.parent_micro_f1, 1.0);
        assert_eq!(r.parent_macro_f1, 1.0);
    }

    #[test]
    fn pooled_versus_averaged_hand_counts() {
        // A: TP=2, FP=0, FN=0; B: TP=0, FP=1, FN=1
        let counts = vec![(2, 0, 0), (0, 1, 1)];
        let (micro, macro_) = f1_from_counts(&counts);
        assert!((micro - 2.0 / 3.0).abs() < 1e-15);
        assert!((macro_ - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_child_within_right_parent_hurts_child_level_only() {
        let t = taxonomy();
        let gold = vec![t.id_of("a").unwrap(), t.id_of("b").unwrap(), t.id_of("c").unwrap()];
        // b predicted as a: parent still correct
        let preds = vec![pred_for(&t, "a"), pred_for(&t, "a"), pred_for(&t, "c")];
        let r = micro_macro_f1(&gold, &preds, &t).unwrap();
        assert!(r.child_macro_f1 < r.parent_macro_f1);
        assert_eq!(r.parent_micro_f1, 1.0);
    }

    #[test]
    fn micro_equals_accuracy_for_single_label() {
        let t = taxonomy();
        let gold = vec![
            t.id_of("a").unwrap(),
            t.id_of("a").unwrap(),
            t.id_of("b").unwrap(),
            t.id_of("c").unwrap(),
        ];
        let preds = vec![pred_for(&t, "a"), pred_for(&t, "b"), pred_for(&t, "b"), pred_for(&t, "b")];
        let r = micro_macro_f1(&gold, &preds, &t).unwrap();
        let accuracy = 2.0 / 4.0;
        assert!((r.child_micro_f1 - accuracy).abs() < 1e-12);
    }

    #[test]
    fn duplicating_a_class_leaves_macro_unchanged() {
        let t = taxonomy();
        let a = t.id_of("a").unwrap();
        let gold = vec![a, a, t.id_of("b").unwrap()];
        let preds = vec![pred_for(&t, "a"), pred_for(&t, "a"), pred_for(&t, "c")];
        let base = micro_macro_f1(&gold, &preds, &t).unwrap();

        // duplicate every instance of class a (all predicted within a)
        let gold2 = vec![a, a, a, a, t.id_of("b").unwrap()];
        let preds2 = vec![
            pred_for(&t, "a"),
            pred_for(&t, "a"),
            pred_for(&t, "a"),
            pred_for(&t, "a"),
            pred_for(&t, "c"),
        ];
        let doubled = micro_macro_f1(&gold2, &preds2, &t).unwrap();
        assert!((base.child_macro_f1 - doubled.child_macro_f1).abs() < 1e-12);
        assert!((base.child_micro_f1 - doubled.child_micro_f1).abs() > 1e-3);
        for (x, y) in base.per_class.iter().zip(doubled.per_class.iter()) {
            if x.level == Level::Child {
                assert!((x.f1 - y.f1).abs() < 1e-12, "class {} f1 changed", x.label);
            }
        }
    }

    #[test]
    fn evaluation_order_does_not_matter() {
        let t = taxonomy();
        let gold = vec![
            t.id_of("a").unwrap(),
            t.id_of("b").unwrap(),
            t.id_of("c").unwrap(),
            t.id_of("a").unwrap(),
        ];
        let preds = vec![pred_for(&t, "a"), pred_for(&t, "c"), pred_for(&t, "c"), pred_for(&t, "b")];
        let base = micro_macro_f1(&gold, &preds, &t).unwrap();
        let perm = [2usize, 0, 3, 1];
        let gold_p: Vec<LabelId> = perm.iter().map(|&i| gold[i]).collect();
        let preds_p: Vec<Prediction> = perm.iter().map(|&i| preds[i].clone()).collect();
        let permuted = micro_macro_f1(&gold_p, &preds_p, &t).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let t = taxonomy();
        let gold = vec![t.id_of("a").unwrap()];
        assert!(matches!(
            micro_macro_f1(&gold, &[], &t),
            Err(EvalError::LengthMismatch)
        ));
    }
}

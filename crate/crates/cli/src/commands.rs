//! Command implementations. Every command writes its artifacts plus a
//! `manifest.json` under the output directory; outputs carry no timestamps
//! so identical config and seed reproduce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};

use hiqc_core::corpus::{self, CorpusSplit, QueryRecord};
use hiqc_core::encoder::{EmbeddingSource, EmbeddingStore};
use hiqc_core::eval::{self, evaluate_on_test, per_class_tsv, EvalResult, PipelineSettings};
use hiqc_core::model::{self, ModelParams};
use hiqc_core::selftrain::{sampled_ledger_tsv, selftrain_loop};
use hiqc_core::taxonomy::{build_label_graph, LabelGraph, Taxonomy};
use hiqc_core::trainer::train;
use hiqc_core::Prediction;

use crate::config::RunConfig;

pub struct Inputs {
    pub taxonomy: Taxonomy,
    pub graph: LabelGraph,
    pub records: Vec<QueryRecord>,
    pub store: Option<EmbeddingStore>,
}

pub fn load_inputs(
    taxonomy: &Path,
    queries: &Path,
    embeddings: Option<&Path>,
) -> Result<Inputs> {
    let taxonomy = Taxonomy::load_path(taxonomy)
        .with_context(|| format!("loading taxonomy {}", taxonomy.display()))?;
    let records = corpus::load_queries_path(queries, &taxonomy)
        .with_context(|| format!("loading queries {}", queries.display()))?;
    let store = match embeddings {
        Some(path) => Some(
            EmbeddingStore::load_path(path)
                .with_context(|| format!("loading embeddings {}", path.display()))?,
        ),
        None => None,
    };
    let graph = build_label_graph(&taxonomy);
    Ok(Inputs { taxonomy, graph, records, store })
}

fn source_of(store: &Option<EmbeddingStore>) -> EmbeddingSource<'_> {
    match store {
        Some(s) => EmbeddingSource::External(s),
        None => EmbeddingSource::Builtin,
    }
}

/// Splits the labeled records and assembles the unlabeled pool from the
/// file's unlabeled rows plus optionally stripped train records.
pub fn prepare_split(records: Vec<QueryRecord>, cfg: &RunConfig) -> Result<CorpusSplit> {
    let (labeled, unlabeled): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|r| r.child_label.is_some());
    if labeled.is_empty() {
        bail!("no labeled records to train on");
    }
    let mut split = corpus::split(labeled, cfg.train.seed, cfg.ratios)?;
    split.unlabeled_pool = unlabeled;
    if cfg.strip_unlabeled > 0.0 {
        let count = ((split.train.len() as f64) * cfg.strip_unlabeled).floor() as usize;
        let count = count.min(split.train.len().saturating_sub(1));
        let mut rng = rand_seed(cfg.train.seed ^ 0x5741_u64);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let strip: std::collections::BTreeSet<usize> = order.into_iter().take(count).collect();
        let mut kept = Vec::with_capacity(split.train.len() - count);
        for (i, r) in split.train.drain(..).enumerate() {
            if strip.contains(&i) {
                split.unlabeled_pool.push(QueryRecord::unlabeled(r.id, r.text));
            } else {
                kept.push(r);
            }
        }
        split.train = kept;
    }
    Ok(split)
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha20Rng {
    rand_chacha::ChaCha20Rng::seed_from_u64(seed)
}

fn write_file(out: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    std::fs::write(out.join(name), contents)
        .with_context(|| format!("writing {}", out.join(name).display()))?;
    files.push(name.to_string());
    Ok(())
}

fn write_manifest(out: &Path, command: &str, mut files: Vec<String>, cfg: &RunConfig) -> Result<()> {
    files.sort();
    let manifest = serde_json::json!({
        "command": command,
        "files": files,
        "config": cfg.echo,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", out.join("manifest.json").display()))?;
    Ok(())
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn cmd_validate(taxonomy: &Path, queries: Option<&Path>) -> i32 {
    let t = match Taxonomy::load_path(taxonomy) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("taxonomy: {e}");
            return 2;
        }
    };
    println!(
        "taxonomy: ok ({} parents, {} children)",
        t.parents().len(),
        t.children().len()
    );
    if let Some(queries) = queries {
        match corpus::load_queries_path(queries, &t) {
            Ok(records) => {
                let labeled = records.iter().filter(|r| r.child_label.is_some()).count();
                println!(
                    "queries: ok ({} labeled, {} unlabeled)",
                    labeled,
                    records.len() - labeled
                );
            }
            Err(e) => {
                eprintln!("queries: {e}");
                return 2;
            }
        }
    }
    0
}

pub fn cmd_gen_synthetic(out: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_out(out)?;
    let corpus = corpus::gen_synthetic(&cfg.synth)?;
    let mut files = Vec::new();
    write_file(out, "taxonomy.txt", &corpus.taxonomy.to_source_text(), &mut files)?;
    write_file(
        out,
        "queries.tsv",
        &corpus::queries_to_tsv(&corpus.records, &corpus.taxonomy),
        &mut files,
    )?;
    let truth: Vec<QueryRecord> = corpus
        .records
        .iter()
        .filter(|r| r.child_label.is_none())
        .map(|r| QueryRecord {
            id: r.id.clone(),
            text: r.text.clone(),
            child_label: Some(corpus.withheld[&r.id]),
        })
        .collect();
    write_file(
        out,
        "queries.truth.tsv",
        &corpus::queries_to_tsv(&truth, &corpus.taxonomy),
        &mut files,
    )?;
    write_manifest(out, "gen-synthetic", files, cfg)?;
    println!(
        "generated {} records ({} unlabeled) over {} child classes",
        corpus.records.len(),
        truth.len(),
        corpus.taxonomy.children().len()
    );
    Ok(())
}

pub fn cmd_train(inputs: &Inputs, cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let source = source_of(&inputs.store);
    let split = prepare_split(inputs.records.clone(), cfg)?;
    let init = ModelParams::init(&inputs.taxonomy, &cfg.model, cfg.train.seed)?;
    let (params, report) = train(&split, &inputs.taxonomy, &inputs.graph, &init, &cfg.train, &source)?;
    let mut files = Vec::new();
    model::save_checkpoint(&params, out.join("checkpoint.json"))?;
    files.push("checkpoint.json".to_string());
    write_file(out, "train_report.json", &serde_json::to_string_pretty(&report)?, &mut files)?;
    write_manifest(out, "train", files, cfg)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} epochs (best {}); val child micro/macro F1 {:.4}/{:.4}",
            report.stopped_epoch, report.best_epoch, last.val_child_micro_f1, last.val_child_macro_f1
        );
    }
    Ok(())
}

pub fn cmd_selftrain(inputs: &Inputs, cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let source = source_of(&inputs.store);
    let split = prepare_split(inputs.records.clone(), cfg)?;
    let init = ModelParams::init(&inputs.taxonomy, &cfg.model, cfg.train.seed)?;
    let (params, train_report) =
        train(&split, &inputs.taxonomy, &inputs.graph, &init, &cfg.train, &source)?;
    let (params, rounds) = selftrain_loop(
        &split,
        &inputs.taxonomy,
        &inputs.graph,
        params,
        &cfg.train,
        &cfg.sampler,
        &source,
    )?;
    let mut files = Vec::new();
    model::save_checkpoint(&params, out.join("checkpoint.json"))?;
    files.push("checkpoint.json".to_string());
    write_file(
        out,
        "train_report.json",
        &serde_json::to_string_pretty(&train_report)?,
        &mut files,
    )?;
    let mut rounds_jsonl = String::new();
    for r in &rounds {
        rounds_jsonl.push_str(&serde_json::to_string(r)?);
        rounds_jsonl.push('\n');
    }
    write_file(out, "rounds.jsonl", &rounds_jsonl, &mut files)?;
    write_file(out, "sampled.tsv", &sampled_ledger_tsv(&rounds), &mut files)?;
    write_manifest(out, "selftrain", files, cfg)?;
    match rounds.last() {
        Some(last) => println!(
            "self-training ran {} rounds; labeled set {}; val child micro/macro F1 {:.4}/{:.4}",
            rounds.len(), last.labeled_size, last.val_child_micro_f1, last.val_child_macro_f1
        ),
        None => println!("self-training ran 0 rounds (empty unlabeled pool)"),
    }
    Ok(())
}

pub fn cmd_predict(
    inputs: &Inputs,
    checkpoint: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<()> {
    ensure_out(out)?;
    let params = model::load_checkpoint(checkpoint, &inputs.taxonomy)?;
    let source = source_of(&inputs.store);
    let refs: Vec<&QueryRecord> = inputs.records.iter().collect();
    let preds = model::predict_batch(&refs, &inputs.graph, &inputs.taxonomy, &params, &source)?;
    let mut tsv = String::new();
    for (r, p) in inputs.records.iter().zip(preds.iter()) {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id,
            inputs.taxonomy.name(p.child),
            inputs.taxonomy.name(p.parent),
            p.child_score(&inputs.taxonomy)
        ));
    }
    let mut files = Vec::new();
    write_file(out, "predictions.tsv", &tsv, &mut files)?;
    write_manifest(out, "predict", files, cfg)?;
    println!("classified {} queries", inputs.records.len());
    Ok(())
}

pub fn cmd_eval(inputs: &Inputs, checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let params = model::load_checkpoint(checkpoint, &inputs.taxonomy)?;
    let source = source_of(&inputs.store);
    let mut gold = Vec::with_capacity(inputs.records.len());
    for r in &inputs.records {
        match r.child_label {
            Some(l) => gold.push(l),
            None => bail!("record `{}` has no gold label; eval needs labeled queries", r.id),
        }
    }
    let refs: Vec<&QueryRecord> = inputs.records.iter().collect();
    let preds: Vec<Prediction> =
        model::predict_batch(&refs, &inputs.graph, &inputs.taxonomy, &params, &source)?;
    let result = eval::micro_macro_f1(&gold, &preds, &inputs.taxonomy)?;
    let mut files = Vec::new();
    write_file(out, "eval_result.json", &serde_json::to_string_pretty(&result)?, &mut files)?;
    write_file(out, "per_class.tsv", &per_class_tsv(&result), &mut files)?;
    write_manifest(out, "eval", files, cfg)?;
    println!(
        "child micro/macro F1 {:.4}/{:.4}; parent micro/macro F1 {:.4}/{:.4}",
        result.child_micro_f1, result.child_macro_f1, result.parent_micro_f1, result.parent_macro_f1
    );
    Ok(())
}

const SWEEP_W_INTRA: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
const SWEEP_W_CONTRASTIVE: [f64; 6] = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9];
const SWEEP_W_CHILD: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
/// Baseline anchor for the one-factor-at-a-time sweep.
const SWEEP_BASELINE: (f64, f64, f64) = (0.1, 0.01, 0.1);

fn weight_key(w: f64) -> String {
    format!("{w}")
}

/// One-factor-at-a-time sweep over the contrastive and sampling weights
/// (full grid behind `sweep_full_grid`), reporting per-variant results as
/// deltas against the baseline configuration.
pub fn cmd_sweep(inputs: &Inputs, cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let source = source_of(&inputs.store);
    let split = prepare_split(inputs.records.clone(), cfg)?;

    let mut cache: BTreeMap<(String, String, String), EvalResult> = BTreeMap::new();
    let mut run_variant = |wi: f64, wc: f64, wch: f64| -> Result<EvalResult> {
        let key = (weight_key(wi), weight_key(wc), weight_key(wch));
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let mut settings = PipelineSettings {
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            sampler: cfg.sampler.clone(),
            init_seed: cfg.train.seed,
        };
        settings.train.weights.w_intra = wi;
        settings.train.weights.w_contrastive = wc;
        settings.sampler.w_child = wch;
        let run = eval::run_pipeline(&split, &inputs.taxonomy, &inputs.graph, &settings, &source)?;
        let result =
            evaluate_on_test(&split, &inputs.taxonomy, &inputs.graph, &run.params, &source)?;
        let dir = out.join(format!("wi_{wi}__wc_{wc}__wch_{wch}"));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("eval_result.json"), serde_json::to_string_pretty(&result)?)?;
        cache.insert(key, result.clone());
        Ok(result)
    };

    let (bi, bc, bch) = SWEEP_BASELINE;
    let baseline = run_variant(bi, bc, bch)?;

    let mut rows = Vec::new();
    let mut push_row = |axis: &str, wi: f64, wc: f64, wch: f64, r: &EvalResult, baseline: &EvalResult| {
        rows.push(serde_json::json!({
            "axis": axis,
            "w_intra": wi,
            "w_contrastive": wc,
            "w_child": wch,
            "child_micro_f1": r.child_micro_f1,
            "child_macro_f1": r.child_macro_f1,
            "delta_micro_f1": r.child_micro_f1 - baseline.child_micro_f1,
            "delta_macro_f1": r.child_macro_f1 - baseline.child_macro_f1,
        }));
    };

    push_row("baseline", bi, bc, bch, &baseline.clone(), &baseline);
    for wi in SWEEP_W_INTRA {
        let r = run_variant(wi, bc, bch)?;
        push_row("w_intra", wi, bc, bch, &r, &baseline);
    }
    for wc in SWEEP_W_CONTRASTIVE {
        let r = run_variant(bi, wc, bch)?;
        push_row("w_contrastive", bi, wc, bch, &r, &baseline);
    }
    for wch in SWEEP_W_CHILD {
        let r = run_variant(bi, bc, wch)?;
        push_row("w_child", bi, bc, wch, &r, &baseline);
    }
    if cfg.sweep_full_grid {
        for wi in SWEEP_W_INTRA {
            for wc in SWEEP_W_CONTRASTIVE {
                for wch in SWEEP_W_CHILD {
                    let r = run_variant(wi, wc, wch)?;
                    push_row("grid", wi, wc, wch, &r, &baseline);
                }
            }
        }
    }

    let mut tsv = String::from(
        "axis\tw_intra\tw_contrastive\tw_child\tchild_micro_f1\tchild_macro_f1\tdelta_micro_f1\tdelta_macro_f1\n",
    );
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row["axis"].as_str().unwrap(),
            row["w_intra"],
            row["w_contrastive"],
            row["w_child"],
            row["child_micro_f1"],
            row["child_macro_f1"],
            row["delta_micro_f1"],
            row["delta_macro_f1"],
        ));
    }
    let mut files = Vec::new();
    write_file(out, "sweep.tsv", &tsv, &mut files)?;
    write_file(out, "sweep.json", &serde_json::to_string_pretty(&rows)?, &mut files)?;
    write_manifest(out, "sweep", files, cfg)?;
    println!("swept {} variants ({} rows)", cache.len(), rows.len());
    Ok(())
}


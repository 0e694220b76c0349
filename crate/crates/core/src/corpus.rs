//! Query ingestion, deterministic splits, and synthetic corpus generation.
//!
//! Query TSV format: three columns `id \t text \t child_label`, no header;
//! an empty label column marks the record as unlabeled.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{LabelId, Taxonomy, TaxonomyError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: expected 3 tab-separated columns")]
    MalformedRow { line: usize },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: label `{label}` is not a child category")]
    NotAChildLabel { line: usize, label: String },
    #[error("line {line}: empty query text")]
    EmptyText { line: usize },
    #[error("line {line}: duplicate query id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("no records to split")]
    EmptyInput,
    #[error("split ratios must be non-negative and sum to 1")]
    InvalidRatios,
    #[error("record `{id}` is unlabeled; split takes labeled records only")]
    UnlabeledRecord { id: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A single query with optional gold child label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub child_label: Option<LabelId>,
}

impl QueryRecord {
    pub fn labeled(id: impl Into<String>, text: impl Into<String>, label: LabelId) -> Self {
        QueryRecord { id: id.into(), text: text.into(), child_label: Some(label) }
    }

    pub fn unlabeled(id: impl Into<String>, text: impl Into<String>) -> Self {
        QueryRecord { id: id.into(), text: text.into(), child_label: None }
    }
}

/// Disjoint labeled train/validation/test splits plus the unlabeled pool.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<QueryRecord>,
    pub validation: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
    pub unlabeled_pool: Vec<QueryRecord>,
}

/// Parses the query TSV format, validating labels against the taxonomy.
/// Blank lines are skipped; records keep file order.
pub fn load_queries(source: &str, t: &Taxonomy) -> Result<Vec<QueryRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        if raw.is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let id = parts.next().unwrap_or("");
        let (text, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(text), Some(label), None) => (text, label),
            _ => return Err(CorpusError::MalformedRow { line }),
        };
        if id.is_empty() {
            return Err(CorpusError::MalformedRow { line });
        }
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateId { line, id: id.to_string() });
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(CorpusError::EmptyText { line });
        }
        let child_label = if label.is_empty() {
            None
        } else {
            let lid = t
                .id_of(label)
                .ok_or_else(|| CorpusError::UnknownLabel { line, label: label.to_string() })?;
            if !t.is_child(lid) {
                return Err(CorpusError::NotAChildLabel { line, label: label.to_string() });
            }
            Some(lid)
        };
        out.push(QueryRecord { id: id.to_string(), text: text.to_string(), child_label });
    }
    Ok(out)
}

pub fn load_queries_path(path: impl AsRef<Path>, t: &Taxonomy) -> Result<Vec<QueryRecord>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    load_queries(&text, t)
}

/// Serializes records back to the query TSV format.
pub fn queries_to_tsv(records: &[QueryRecord], t: &Taxonomy) -> String {
    let mut out = String::new();
    for r in records {
        let label = r.child_label.map(|l| t.name(l)).unwrap_or("");
        out.push_str(&format!("{}\t{}\t{}\n", r.id, r.text, label));
    }
    out
}

/// Largest-remainder allocation of `n` items across three ratios.
fn allocate(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let ideal = [n as f64 * ratios.0, n as f64 * ratios.1, n as f64 * ratios.2];
    let mut counts = [0usize; 3];
    for (c, &x) in counts.iter_mut().zip(ideal.iter()) {
        *c = x.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Deterministic 3-way split of labeled records. Stratifies by child label
/// when every class has at least 3 members; nonzero-ratio splits are kept
/// non-empty when the record count allows it.
pub fn split(
    records: Vec<QueryRecord>,
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<CorpusSplit, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if !(ratios.0 >= 0.0 && ratios.1 >= 0.0 && ratios.2 >= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios);
    }
    for r in &records {
        if r.child_label.is_none() {
            return Err(CorpusError::UnlabeledRecord { id: r.id.clone() });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<LabelId, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.child_label.unwrap()).or_default().push(i);
    }
    let stratify = by_class.values().all(|v| v.len() >= 3);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    if stratify {
        for members in by_class.values() {
            let mut idx = members.clone();
            shuffle(&mut idx, &mut rng);
            let counts = allocate(idx.len(), ratios);
            let mut offset = 0;
            for (part, &c) in parts.iter_mut().zip(counts.iter()) {
                part.extend_from_slice(&idx[offset..offset + c]);
                offset += c;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..records.len()).collect();
        shuffle(&mut idx, &mut rng);
        let counts = allocate(idx.len(), ratios);
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(counts.iter()) {
            part.extend_from_slice(&idx[offset..offset + c]);
            offset += c;
        }
    }

    // Keep every nonzero-ratio split non-empty while records allow it.
    let nonzero = [ratios.0 > 0.0, ratios.1 > 0.0, ratios.2 > 0.0];
    loop {
        let Some(empty) = (0..3).find(|&i| nonzero[i] && parts[i].is_empty()) else {
            break;
        };
        let Some(donor) = (0..3)
            .filter(|&i| parts[i].len() >= 2)
            .max_by_key(|&i| (parts[i].len(), 2 - i))
        else {
            break;
        };
        let moved = parts[donor].pop().unwrap();
        parts[empty].push(moved);
    }

    let mut slots: Vec<Option<QueryRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<QueryRecord> {
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    Ok(CorpusSplit {
        train: take(&parts[0]),
        validation: take(&parts[1]),
        test: take(&parts[2]),
        unlabeled_pool: Vec::new(),
    })
}

/// Fisher-Yates with a fixed draw order.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Parameters for the synthetic hierarchical corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub parents: usize,
    pub children_per_parent: usize,
    pub queries_per_child: usize,
    /// Geometric class-size ratio in (0, 1]; child k of a parent receives
    /// `ceil(queries_per_child * imbalance^k)` queries.
    pub imbalance: f64,
    pub typo_rate: f64,
    pub unlabeled_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            parents: 2,
            children_per_parent: 2,
            queries_per_child: 50,
            imbalance: 1.0,
            typo_rate: 0.0,
            unlabeled_fraction: 0.0,
        }
    }
}

/// Generated corpus plus the bookkeeping needed for scoring experiments:
/// ground truth of withheld labels, per-class vocabularies, and ids of
/// queries that received a typo edit.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    pub records: Vec<QueryRecord>,
    pub withheld: BTreeMap<String, LabelId>,
    pub class_vocab: BTreeMap<LabelId, Vec<String>>,
    pub typoed: BTreeSet<String>,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwz";
const VOWELS: &[u8] = b"aeiou";
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const STEMS_PER_CLASS: usize = 12;

fn random_stem(rng: &mut ChaCha20Rng, tag: &str) -> String {
    let len = rng.gen_range(3..=6);
    let mut s = String::with_capacity(len + tag.len());
    for i in 0..len {
        let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
        s.push(set[rng.gen_range(0..set.len())] as char);
    }
    s.push_str(tag);
    s
}

fn one_edit(rng: &mut ChaCha20Rng, text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut op = rng.gen_range(0..3u32);
    if chars.len() <= 1 && op == 1 {
        op = 2;
    }
    match op {
        0 => {
            // insert
            let pos = rng.gen_range(0..=chars.len());
            let ch = LETTERS[rng.gen_range(0..LETTERS.len())] as char;
            let mut out = chars.clone();
            out.insert(pos, ch);
            out.into_iter().collect()
        }
        1 => {
            // delete
            let pos = rng.gen_range(0..chars.len());
            let mut out = chars.clone();
            out.remove(pos);
            out.into_iter().collect()
        }
        _ => {
            // substitute with a different letter
            let pos = rng.gen_range(0..chars.len());
            let mut out = chars.clone();
            loop {
                let ch = LETTERS[rng.gen_range(0..LETTERS.len())] as char;
                if ch != out[pos] {
                    out[pos] = ch;
                    break;
                }
            }
            out.into_iter().collect()
        }
    }
}

/// Generates a reproducible hierarchical corpus. Each child class draws from
/// its own disjoint stem vocabulary; typo'd queries are derived from emitted
/// labeled texts so every typo'd unlabeled query has a labeled neighbor of
/// the same class within edit distance 2.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, CorpusError> {
    if cfg.parents == 0 || cfg.children_per_parent == 0 || cfg.queries_per_child == 0 {
        return Err(CorpusError::InvalidConfig("counts must be at least 1".into()));
    }
    if !(cfg.imbalance > 0.0 && cfg.imbalance <= 1.0) {
        return Err(CorpusError::InvalidConfig("imbalance must be in (0, 1]".into()));
    }
    for (name, p) in [("typo_rate", cfg.typo_rate), ("unlabeled_fraction", cfg.unlabeled_fraction)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(CorpusError::InvalidConfig(format!("{name} must be in [0, 1]")));
        }
    }
    let total_classes = cfg.parents * cfg.children_per_parent;
    if total_classes > 26 * 26 {
        return Err(CorpusError::InvalidConfig("at most 676 child classes supported".into()));
    }

    let mut pairs = Vec::with_capacity(cfg.parents);
    for p in 0..cfg.parents {
        let children: Vec<String> = (0..cfg.children_per_parent)
            .map(|c| format!("dept-{p:03}-class-{c:03}"))
            .collect();
        pairs.push((format!("dept-{p:03}"), children));
    }
    let taxonomy = Taxonomy::from_pairs(&pairs)?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut class_vocab: BTreeMap<LabelId, Vec<String>> = BTreeMap::new();
    let mut records = Vec::new();
    let mut withheld = BTreeMap::new();
    let mut typoed = BTreeSet::new();
    let mut next_id = 0usize;

    for p in 0..cfg.parents {
        for c in 0..cfg.children_per_parent {
            let class_index = p * cfg.children_per_parent + c;
            let label = taxonomy
                .id_of(&format!("dept-{p:03}-class-{c:03}"))
                .expect("generated label exists");
            let tag: String = [
                LETTERS[class_index / 26] as char,
                LETTERS[class_index % 26] as char,
            ]
            .iter()
            .collect();
            let mut vocab: Vec<String> = Vec::with_capacity(STEMS_PER_CLASS);
            while vocab.len() < STEMS_PER_CLASS {
                let stem = random_stem(&mut rng, &tag);
                if !vocab.contains(&stem) {
                    vocab.push(stem);
                }
            }

            let count =
                (cfg.queries_per_child as f64 * cfg.imbalance.powi(c as i32)).ceil() as usize;
            struct Plan {
                clean: String,
                labeled: bool,
                typo: bool,
            }
            let plans: Vec<Plan> = (0..count)
                .map(|_| {
                    let tokens = rng.gen_range(2..=5usize);
                    let clean = (0..tokens)
                        .map(|_| vocab[rng.gen_range(0..vocab.len())].as_str())
                        .collect::<Vec<_>>()
                        .join(" ");
                    let labeled = !rng.gen_bool(cfg.unlabeled_fraction);
                    let typo = rng.gen_bool(cfg.typo_rate);
                    Plan { clean, labeled, typo }
                })
                .collect();

            let mut labeled_texts: Vec<String> = Vec::new();
            let mut emit = |records: &mut Vec<QueryRecord>,
                            withheld: &mut BTreeMap<String, LabelId>,
                            typoed: &mut BTreeSet<String>,
                            rng: &mut ChaCha20Rng,
                            labeled_texts: &mut Vec<String>,
                            plan: &Plan| {
                let id = format!("q{next_id:06}");
                next_id += 1;
                let text = if plan.typo {
                    if labeled_texts.is_empty() && !plan.labeled {
                        // no labeled base available: emit clean to preserve
                        // the distance-2 guarantee
                        plan.clean.clone()
                    } else {
                        let base = if labeled_texts.is_empty() {
                            plan.clean.clone()
                        } else {
                            labeled_texts[rng.gen_range(0..labeled_texts.len())].clone()
                        };
                        typoed.insert(id.clone());
                        one_edit(rng, &base)
                    }
                } else {
                    plan.clean.clone()
                };
                if plan.labeled {
                    labeled_texts.push(text.clone());
                    records.push(QueryRecord::labeled(id, text, label));
                } else {
                    withheld.insert(id.clone(), label);
                    records.push(QueryRecord::unlabeled(id, text));
                }
            };
            for plan in plans.iter().filter(|p| p.labeled) {
                emit(&mut records, &mut withheld, &mut typoed, &mut rng, &mut labeled_texts, plan);
            }
            for plan in plans.iter().filter(|p| !p.labeled) {
                emit(&mut records, &mut withheld, &mut typoed, &mut rng, &mut labeled_texts, plan);
            }
            class_vocab.insert(label, vocab);
        }
    }

    Ok(SyntheticCorpus { taxonomy, records, withheld, class_vocab, typoed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_taxonomy() -> Taxonomy {
        Taxonomy::from_pairs(&[
            ("kitchen", vec!["kitchen-knives", "kitchen-pans"]),
            ("living", vec!["sofas", "lamps"]),
        ])
        .unwrap()
    }

    #[test]
    fn parses_labeled_and_unlabeled_rows() {
        let t = demo_taxonomy();
        let recs = load_queries("q1\tknife set\tkitchen-knives\nq2\tnife\t\n", &t).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].child_label, t.id_of("kitchen-knives"));
        assert_eq!(recs[1].text, "nife");
        assert_eq!(recs[1].child_label, None);
    }

    #[test]
    fn rejects_bad_rows() {
        let t = demo_taxonomy();
        assert!(matches!(
            load_queries("q1\tknife\tweapons-x\n", &t).unwrap_err(),
            CorpusError::UnknownLabel { line: 1, .. }
        ));
        assert!(matches!(
            load_queries("q1\tknife\n", &t).unwrap_err(),
            CorpusError::MalformedRow { line: 1 }
        ));
        assert!(matches!(
            load_queries("q1\t   \tsofas\n", &t).unwrap_err(),
            CorpusError::EmptyText { line: 1 }
        ));
        assert!(matches!(
            load_queries("q1\ta\tsofas\nq1\tb\tsofas\n", &t).unwrap_err(),
            CorpusError::DuplicateId { line: 2, .. }
        ));
        assert!(matches!(
            load_queries("q1\tknife\tkitchen\n", &t).unwrap_err(),
            CorpusError::NotAChildLabel { line: 1, .. }
        ));
    }

    fn labeled_batch(t: &Taxonomy, n: usize) -> Vec<QueryRecord> {
        let labels = t.children().to_vec();
        (0..n)
            .map(|i| QueryRecord::labeled(format!("q{i}"), format!("text {i}"), labels[i % labels.len()]))
            .collect()
    }

    #[test]
    fn ten_records_split_eight_one_one() {
        let t = demo_taxonomy();
        let s = split(labeled_batch(&t, 10), 7, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let t = demo_taxonomy();
        let a = split(labeled_batch(&t, 37), 41, (0.8, 0.1, 0.1)).unwrap();
        let b = split(labeled_batch(&t, 37), 41, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!(a, b);
        let c = split(labeled_batch(&t, 37), 42, (0.8, 0.1, 0.1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stratified_split_preserves_class_proportions() {
        let t = demo_taxonomy();
        let records = labeled_batch(&t, 100); // 4 classes x 25
        let s = split(records, 3, (0.8, 0.1, 0.1)).unwrap();
        for part in [&s.train, &s.validation, &s.test] {
            let mut by_class: BTreeMap<LabelId, usize> = BTreeMap::new();
            for r in part {
                *by_class.entry(r.child_label.unwrap()).or_default() += 1;
            }
            let ideal = 25.0 * part.len() as f64 / 100.0;
            for &count in by_class.values() {
                assert!(
                    (count as f64 - ideal).abs() <= 1.0,
                    "class count {count} vs ideal {ideal} in part of size {}",
                    part.len()
                );
            }
        }
    }

    #[test]
    fn split_partition_covers_every_id_once() {
        let t = demo_taxonomy();
        for n in [3, 5, 11, 100] {
            for seed in [0, 9] {
                let s = split(labeled_batch(&t, n), seed, (0.8, 0.1, 0.1)).unwrap();
                let mut ids: Vec<&str> = s
                    .train
                    .iter()
                    .chain(&s.validation)
                    .chain(&s.test)
                    .map(|r| r.id.as_str())
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), n);
                assert!(!s.train.is_empty() && !s.validation.is_empty() && !s.test.is_empty());
            }
        }
    }

    #[test]
    fn imbalance_one_gives_equal_classes() {
        let corpus = gen_synthetic(&SyntheticConfig {
            seed: 5,
            parents: 2,
            children_per_parent: 3,
            queries_per_child: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut per_class: BTreeMap<LabelId, usize> = BTreeMap::new();
        for r in &corpus.records {
            *per_class.entry(r.child_label.unwrap()).or_default() += 1;
        }
        assert_eq!(per_class.len(), 6);
        assert!(per_class.values().all(|&c| c == 10));
    }

    #[test]
    fn geometric_imbalance_class_sizes() {
        let corpus = gen_synthetic(&SyntheticConfig {
            seed: 1,
            parents: 2,
            children_per_parent: 2,
            queries_per_child: 50,
            imbalance: 0.2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut per_class: BTreeMap<LabelId, usize> = BTreeMap::new();
        for r in &corpus.records {
            *per_class.entry(r.child_label.unwrap()).or_default() += 1;
        }
        for p in 0..2 {
            let first = corpus.taxonomy.id_of(&format!("dept-{p:03}-class-000")).unwrap();
            let second = corpus.taxonomy.id_of(&format!("dept-{p:03}-class-001")).unwrap();
            assert_eq!(per_class[&first], 50);
            assert_eq!(per_class[&second], 10);
        }
    }

    #[test]
    fn zero_typo_rate_texts_are_vocab_concatenations() {
        let corpus = gen_synthetic(&SyntheticConfig {
            seed: 11,
            parents: 2,
            children_per_parent: 2,
            queries_per_child: 20,
            unlabeled_fraction: 0.3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert!(corpus.typoed.is_empty());
        for r in &corpus.records {
            let label = r.child_label.unwrap_or_else(|| corpus.withheld[&r.id]);
            let vocab = &corpus.class_vocab[&label];
            let tokens: Vec<&str> = r.text.split(' ').collect();
            assert!((2..=5).contains(&tokens.len()));
            for tok in tokens {
                assert!(vocab.iter().any(|s| s == tok), "token {tok} not in class vocab");
            }
        }
    }

    #[test]
    fn generator_is_reproducible() {
        let cfg = SyntheticConfig {
            seed: 99,
            parents: 3,
            children_per_parent: 2,
            queries_per_child: 15,
            imbalance: 0.5,
            typo_rate: 0.4,
            unlabeled_fraction: 0.5,
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.withheld, b.withheld);
        assert_eq!(a.typoed, b.typoed);
    }

    fn levenshtein_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut dp: Vec<Vec<usize>> = vec![vec![0; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + sub);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn typoed_unlabeled_queries_have_close_labeled_neighbors() {
        let corpus = gen_synthetic(&SyntheticConfig {
            seed: 23,
            parents: 2,
            children_per_parent: 3,
            queries_per_child: 30,
            imbalance: 0.6,
            typo_rate: 0.5,
            unlabeled_fraction: 0.5,
        })
        .unwrap();
        assert!(!corpus.typoed.is_empty());
        for r in corpus.records.iter().filter(|r| r.child_label.is_none()) {
            if !corpus.typoed.contains(&r.id) {
                continue;
            }
            let class = corpus.withheld[&r.id];
            let close = corpus
                .records
                .iter()
                .filter(|o| o.child_label == Some(class))
                .any(|o| levenshtein_oracle(&o.text, &r.text) <= 2);
            assert!(close, "typo'd unlabeled {} has no close labeled neighbor", r.id);
        }
    }
}

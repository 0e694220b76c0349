//! Query text to dense vectors: a trainable hashed n-gram encoder plus a
//! loader for externally produced embeddings.
//!
//! Features are character n-grams (3..=5 by default) over the full text and
//! whitespace word unigrams, hashed into a fixed bucket table and
//! mean-pooled. Summation runs in ascending bucket order so the result
//! depends only on the feature multiset.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::fnv1a64;
use crate::math::Mat;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("query text is empty")]
    EmptyText,
    #[error("buckets must be >= 1024 and d_q >= 8")]
    InvalidDimensions,
    #[error("line {line}: expected {expected} values, found {found}")]
    WidthMismatch { line: usize, expected: usize, found: usize },
    #[error("malformed embedding header (expected `N d`)")]
    MalformedHeader,
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("embedding row count does not match header")]
    RowCountMismatch,
    #[error("line {line}: unparseable value")]
    BadValue { line: usize },
    #[error("no embedding stored for query id `{0}`")]
    MissingEmbedding(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hashed n-gram encoder parameters. The bucket table is the trainable part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub table: Mat,
    pub buckets: usize,
    pub d_q: usize,
    pub hash_seed: u64,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl EncoderParams {
    pub fn new(buckets: usize, d_q: usize, hash_seed: u64, init_seed: u64) -> Result<Self, EncoderError> {
        if buckets < 1024 || d_q < 8 {
            return Err(EncoderError::InvalidDimensions);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(init_seed);
        let table = Mat::from_fn(buckets, d_q, |_, _| rng.gen_range(-0.1..0.1));
        Ok(EncoderParams { table, buckets, d_q, hash_seed, ngram_min: 3, ngram_max: 5 })
    }

    /// Bucket assignment for one feature string.
    pub fn bucket_of(&self, feature: &str) -> usize {
        (fnv1a64(feature.as_bytes(), self.hash_seed) % self.buckets as u64) as usize
    }

    /// Multiset of feature buckets for a text, keyed in ascending bucket
    /// order: character n-grams over the full text plus word unigrams.
    pub fn bucket_counts(&self, text: &str) -> Result<BTreeMap<usize, usize>, EncoderError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let chars: Vec<char> = trimmed.chars().collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut buf = String::new();
        for n in self.ngram_min..=self.ngram_max {
            if chars.len() < n {
                break;
            }
            for win in chars.windows(n) {
                buf.clear();
                buf.extend(win.iter());
                *counts.entry(self.bucket_of(&buf)).or_default() += 1;
            }
        }
        for word in trimmed.split_whitespace() {
            *counts.entry(self.bucket_of(word)).or_default() += 1;
        }
        Ok(counts)
    }

    /// Mean-pooled embedding of the text's feature buckets.
    pub fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let counts = self.bucket_counts(text)?;
        Ok(self.pool(&counts))
    }

    /// Mean of table rows weighted by multiplicity, in ascending bucket order.
    pub fn pool(&self, counts: &BTreeMap<usize, usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.d_q];
        let mut total = 0usize;
        for (&bucket, &count) in counts {
            let row = self.table.row(bucket);
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v * count as f64;
            }
            total += count;
        }
        if total > 0 {
            let inv = 1.0 / total as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
        out
    }
}

/// Externally computed embeddings keyed by query id.
///
/// File format: first line `N d`, then N lines `id v1 v2 ... vd`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    width: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn parse(source: &str) -> Result<Self, EncoderError> {
        let mut lines = source.lines().enumerate();
        let (_, header) = lines.next().ok_or(EncoderError::MalformedHeader)?;
        let mut parts = header.split_whitespace();
        let n: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or(EncoderError::MalformedHeader)?;
        let width: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or(EncoderError::MalformedHeader)?;
        if parts.next().is_some() || width == 0 {
            return Err(EncoderError::MalformedHeader);
        }
        let mut vectors = BTreeMap::new();
        for (lineno, raw) in lines {
            let line = lineno + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut fields = raw.split_whitespace();
            let id = fields.next().expect("non-empty line has a field");
            let values: Vec<f64> = fields
                .map(|v| v.parse::<f64>().map_err(|_| EncoderError::BadValue { line }))
                .collect::<Result<_, _>>()?;
            if values.len() != width {
                return Err(EncoderError::WidthMismatch { line, expected: width, found: values.len() });
            }
            if !values.iter().all(|v| v.is_finite()) {
                return Err(EncoderError::BadValue { line });
            }
            if vectors.insert(id.to_string(), values).is_some() {
                return Err(EncoderError::DuplicateId { line, id: id.to_string() });
            }
        }
        if vectors.len() != n {
            return Err(EncoderError::RowCountMismatch);
        }
        Ok(EmbeddingStore { width, vectors })
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let text = std::fs::read_to_string(path)?;
        EmbeddingStore::parse(&text)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&[f64], EncoderError> {
        self.vectors
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| EncoderError::MissingEmbedding(id.to_string()))
    }
}

/// Where query embeddings come from: the built-in trainable encoder or an
/// external store looked up by query id.
#[derive(Clone, Copy, Debug)]
pub enum EmbeddingSource<'a> {
    Builtin,
    External(&'a EmbeddingStore),
}

impl<'a> EmbeddingSource<'a> {
    pub fn is_builtin(&self) -> bool {
        matches!(self, EmbeddingSource::Builtin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::cosine;

    fn params(seed: u64) -> EncoderParams {
        EncoderParams::new(8192, 64, 7, seed).unwrap()
    }

    #[test]
    fn single_trigram_returns_its_table_row() {
        let p = params(3);
        // "abc" yields one 3-gram and one word unigram, both the string
        // "abc", so pooling averages the same row with itself.
        let bucket = p.bucket_of("abc");
        let out = p.encode("abc").unwrap();
        assert_eq!(out.as_slice(), p.table.row(bucket));
    }

    #[test]
    fn encode_is_deterministic() {
        let p = params(4);
        assert_eq!(p.encode("knife set").unwrap(), p.encode("knife set").unwrap());
    }

    #[test]
    fn typo_stays_closer_than_unrelated_word() {
        let mut wins = 0;
        for seed in 0..20 {
            let p = params(seed);
            let knife = p.encode("knife").unwrap();
            let nife = p.encode("nife").unwrap();
            let sofa = p.encode("sofa").unwrap();
            if cosine(&knife, &nife) > cosine(&knife, &sofa) {
                wins += 1;
            }
        }
        assert!(wins > 10, "typo similarity won only {wins}/20 seeds");
    }

    #[test]
    fn equal_feature_multisets_encode_identically() {
        let p = params(9);
        // Same 4-char prefixes and suffixes, different middles: swapping the
        // words preserves the full feature multiset.
        let a = p.encode("abcdmmwxyz abcdnnwxyz").unwrap();
        let b = p.encode("abcdnnwxyz abcdmmwxyz").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_rejected() {
        let p = params(0);
        assert!(matches!(p.encode("   "), Err(EncoderError::EmptyText)));
    }

    #[test]
    fn dimension_floor_is_enforced() {
        assert!(matches!(
            EncoderParams::new(512, 64, 0, 0),
            Err(EncoderError::InvalidDimensions)
        ));
        assert!(matches!(
            EncoderParams::new(2048, 4, 0, 0),
            Err(EncoderError::InvalidDimensions)
        ));
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        // d/dtable of (c . encode(text)) is c/total scattered over touched
        // rows; compare against central differences.
        let mut p = EncoderParams::new(1024, 8, 1, 2).unwrap();
        let text = "finite diff check";
        let counts = p.bucket_counts(text).unwrap();
        let total: usize = counts.values().sum();
        let c: Vec<f64> = (0..p.d_q).map(|i| 0.3 + 0.1 * i as f64).collect();
        let h = 1e-4;
        for (&bucket, &count) in &counts {
            for dim in 0..p.d_q {
                let analytic = c[dim] * count as f64 / total as f64;
                let orig = p.table.at(bucket, dim);
                p.table.set(bucket, dim, orig + h);
                let up: f64 = p.encode(text).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum();
                p.table.set(bucket, dim, orig - h);
                let down: f64 = p.encode(text).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum();
                p.table.set(bucket, dim, orig);
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-10);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-4,
                    "bucket {bucket} dim {dim}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn store_parses_and_validates() {
        let s = EmbeddingStore::parse("2 3\na 1 2 3\nb 0.5 -1 2.5\n").unwrap();
        assert_eq!(s.width(), 3);
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("b").unwrap(), &[0.5, -1.0, 2.5]);
        assert!(matches!(
            EmbeddingStore::parse("1 3\na 1 2\n").unwrap_err(),
            EncoderError::WidthMismatch { line: 2, expected: 3, found: 2 }
        ));
        assert!(matches!(
            EmbeddingStore::parse("2 2\na 1 2\na 3 4\n").unwrap_err(),
            EncoderError::DuplicateId { line: 3, .. }
        ));
        assert!(matches!(
            EmbeddingStore::parse("x 3\n").unwrap_err(),
            EncoderError::MalformedHeader
        ));
        assert!(matches!(
            EmbeddingStore::parse("3 2\na 1 2\n").unwrap_err(),
            EncoderError::RowCountMismatch
        ));
    }
}

//! Hierarchical navigable small world graph over cosine distance.
//!
//! Vectors are L2-normalized at insert so distance is `1 - dot`. Level
//! draws come from a fixed-seed generator and all tie-breaks are by node id,
//! making construction and search deterministic for identical inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnswConfig {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig { m: 16, ef_construction: 200, ef_search: 64 }
    }
}

const LEVEL_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
const MAX_LEVEL: usize = 24;

/// (distance, id) ordered ascending with id tie-break.
#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    id: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct HnswIndex {
    cfg: HnswConfig,
    vectors: Vec<Vec<f64>>,
    /// node -> level -> neighbor ids
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    top_level: usize,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    1.0 - dot
}

impl HnswIndex {
    pub fn build(vectors: &[Vec<f64>], cfg: HnswConfig) -> Self {
        let mut index = HnswIndex {
            cfg,
            vectors: Vec::with_capacity(vectors.len()),
            links: Vec::with_capacity(vectors.len()),
            entry: 0,
            top_level: 0,
        };
        let ml = 1.0 / (cfg.m.max(2) as f64).ln();
        let mut rng = ChaCha20Rng::seed_from_u64(LEVEL_SEED);
        for v in vectors {
            let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let level = ((-u.ln()) * ml).floor() as usize;
            index.insert(normalized(v), level.min(MAX_LEVEL));
        }
        index
    }

    fn insert(&mut self, vector: Vec<f64>, level: usize) {
        let id = self.vectors.len() as u32;
        self.vectors.push(vector);
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.top_level = level;
            return;
        }
        let q = self.vectors[id as usize].clone();

        let mut ep = self.entry;
        for lc in ((level + 1)..=self.top_level).rev() {
            ep = self.greedy_descend(&q, ep, lc);
        }
        for lc in (0..=level.min(self.top_level)).rev() {
            let candidates = self.search_layer(&q, ep, self.cfg.ef_construction, lc);
            let m_max = if lc == 0 { self.cfg.m * 2 } else { self.cfg.m };
            let chosen: Vec<u32> =
                candidates.iter().take(self.cfg.m).map(|e| e.id).collect();
            for &n in &chosen {
                self.links[id as usize][lc].push(n);
                self.links[n as usize][lc].push(id);
                if self.links[n as usize][lc].len() > m_max {
                    self.shrink(n, lc, m_max);
                }
            }
            if let Some(best) = candidates.first() {
                ep = best.id;
            }
        }
        if level > self.top_level {
            self.top_level = level;
            self.entry = id;
        }
    }

    /// Keeps the `m_max` closest neighbors of `node` at `level`.
    fn shrink(&mut self, node: u32, level: usize, m_max: usize) {
        let base = &self.vectors[node as usize];
        let mut scored: Vec<Entry> = self.links[node as usize][level]
            .iter()
            .map(|&n| Entry { dist: distance(base, &self.vectors[n as usize]), id: n })
            .collect();
        scored.sort_unstable();
        self.links[node as usize][level] = scored.into_iter().take(m_max).map(|e| e.id).collect();
    }

    fn greedy_descend(&self, q: &[f64], mut ep: u32, level: usize) -> u32 {
        let mut best = distance(q, &self.vectors[ep as usize]);
        loop {
            let mut improved = false;
            for &n in &self.links[ep as usize][level] {
                let d = distance(q, &self.vectors[n as usize]);
                if d < best || (d == best && n < ep) {
                    best = d;
                    ep = n;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Beam search at one layer; returns candidates sorted ascending.
    fn search_layer(&self, q: &[f64], ep: u32, ef: usize, level: usize) -> Vec<Entry> {
        let mut visited = vec![false; self.vectors.len()];
        visited[ep as usize] = true;
        let start = Entry { dist: distance(q, &self.vectors[ep as usize]), id: ep };
        // candidates: nearest first (min-heap via Reverse); results: farthest first
        let mut candidates = BinaryHeap::new();
        candidates.push(std::cmp::Reverse(start));
        let mut results: BinaryHeap<Entry> = BinaryHeap::new();
        results.push(start);

        while let Some(std::cmp::Reverse(current)) = candidates.pop() {
            let worst = results.peek().expect("results never empty").dist;
            if current.dist > worst && results.len() >= ef {
                break;
            }
            for &n in &self.links[current.id as usize][level] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let d = distance(q, &self.vectors[n as usize]);
                let worst = results.peek().expect("non-empty").dist;
                if results.len() < ef || d < worst {
                    let e = Entry { dist: d, id: n };
                    candidates.push(std::cmp::Reverse(e));
                    results.push(e);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out = results.into_vec();
        out.sort_unstable();
        out
    }

    /// Approximate k nearest neighbors as (node position, cosine distance),
    /// ascending.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        if self.vectors.is_empty() || k == 0 {
            return Vec::new();
        }
        let q = normalized(query);
        let mut ep = self.entry;
        for lc in (1..=self.top_level).rev() {
            ep = self.greedy_descend(&q, ep, lc);
        }
        let ef = self.cfg.ef_search.max(k);
        let found = self.search_layer(&q, ep, ef, 0);
        found.into_iter().take(k).map(|e| (e.id as usize, e.dist)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn exact_knn(vectors: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
        let q = normalized(query);
        let mut scored: Vec<Entry> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Entry { dist: distance(&q, &normalized(v)), id: i as u32 })
            .collect();
        scored.sort_unstable();
        scored.into_iter().take(k).map(|e| e.id as usize).collect()
    }

    #[test]
    fn finds_exact_match_first() {
        let vectors = random_vectors(200, 16, 5);
        let index = HnswIndex::build(&vectors, HnswConfig::default());
        let hits = index.knn(&vectors[42], 3);
        assert_eq!(hits[0].0, 42);
        assert!(hits[0].1.abs() < 1e-9);
    }

    #[test]
    fn recall_at_10_exceeds_095_on_random_data() {
        let vectors = random_vectors(1000, 32, 9);
        let index = HnswIndex::build(&vectors, HnswConfig::default());
        let queries = random_vectors(100, 32, 10);
        let mut hit = 0usize;
        let mut total = 0usize;
        for q in &queries {
            let truth = exact_knn(&vectors, q, 10);
            let approx: Vec<usize> = index.knn(q, 10).into_iter().map(|(i, _)| i).collect();
            total += truth.len();
            hit += truth.iter().filter(|i| approx.contains(i)).count();
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.95, "recall {recall}");
    }

    #[test]
    fn build_is_deterministic() {
        let vectors = random_vectors(300, 8, 3);
        let a = HnswIndex::build(&vectors, HnswConfig::default());
        let b = HnswIndex::build(&vectors, HnswConfig::default());
        let q = random_vectors(1, 8, 77).pop().unwrap();
        assert_eq!(a.knn(&q, 5), b.knn(&q, 5));
    }
}

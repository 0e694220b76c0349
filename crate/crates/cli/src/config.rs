//! `key=value` run configuration covering model dimensions, training,
//! sampling, splitting, and the synthetic generator.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hiqc_core::corpus::SyntheticConfig;
use hiqc_core::selftrain::{Budget, IndexKind};
use hiqc_core::{ModelConfig, SamplerConfig, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SyntheticConfig,
    pub ratios: (f64, f64, f64),
    /// Fraction of the train split whose labels are stripped into the
    /// unlabeled pool (0 keeps the file's own unlabeled rows as the pool).
    pub strip_unlabeled: f64,
    pub sweep_full_grid: bool,
    /// Raw key/value pairs for the manifest echo.
    pub echo: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            synth: SyntheticConfig::default(),
            ratios: (0.8, 0.1, 0.1),
            strip_unlabeled: 0.0,
            sweep_full_grid: false,
            echo: BTreeMap::new(),
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("config key `{key}`: expected a boolean, found `{value}`"),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| anyhow::anyhow!("config key `{key}`: cannot parse `{value}`"))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected `key=value`, found `{line}`", lineno + 1);
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.echo.insert(key.to_string(), value.to_string());
        match key {
            "seed" => self.train.seed = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse_num(key, value)?,
            "lambda" => self.train.weights.lambda = parse_num(key, value)?,
            "w_intra" => self.train.weights.w_intra = parse_num(key, value)?,
            "w_contrastive" => self.train.weights.w_contrastive = parse_num(key, value)?,
            "tau" => self.train.weights.tau = parse_num(key, value)?,
            "literal_contrastive" => self.train.weights.literal_contrastive = parse_bool(key, value)?,
            "k_neighbors" => self.sampler.k_neighbors = parse_num(key, value)?,
            "w_child" => self.sampler.w_child = parse_num(key, value)?,
            "epsilon_smoothing" => self.sampler.epsilon_smoothing = parse_num(key, value)?,
            "temperature_sample" => self.sampler.temperature_sample = parse_num(key, value)?,
            "budget" => {
                self.sampler.budget = if value.contains('.') {
                    Budget::Fraction(parse_num(key, value)?)
                } else {
                    Budget::Count(parse_num(key, value)?)
                }
            }
            "max_rounds" => self.sampler.max_rounds = parse_num(key, value)?,
            "patience_rounds" => self.sampler.patience_rounds = parse_num(key, value)?,
            "index" => {
                self.sampler.index_kind = match value {
                    "exact" | "exact-cosine" => IndexKind::ExactCosine,
                    "hnsw" | "hnsw-cosine" => IndexKind::HnswCosine,
                    "levenshtein" => IndexKind::Levenshtein,
                    _ => bail!(
                        "config key `index`: expected exact, hnsw, or levenshtein, found `{value}`"
                    ),
                }
            }
            "literal_prob_direction" => {
                self.sampler.literal_prob_direction = parse_bool(key, value)?
            }
            "hnsw_m" => self.sampler.hnsw.m = parse_num(key, value)?,
            "hnsw_ef_construction" => self.sampler.hnsw.ef_construction = parse_num(key, value)?,
            "hnsw_ef_search" => self.sampler.hnsw.ef_search = parse_num(key, value)?,
            "d_q" => self.model.d_q = parse_num(key, value)?,
            "d_h" => self.model.d_h = parse_num(key, value)?,
            "d_g" => self.model.d_g = parse_num(key, value)?,
            "buckets" => self.model.buckets = parse_num(key, value)?,
            "hash_seed" => self.model.hash_seed = parse_num(key, value)?,
            "mask_root_attention" => self.model.mask_root_attention = parse_bool(key, value)?,
            "fuse_labels" => self.model.fuse_labels = parse_bool(key, value)?,
            "ratios" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    bail!("config key `ratios`: expected three comma-separated values");
                }
                self.ratios = (
                    parse_num(key, parts[0].trim())?,
                    parse_num(key, parts[1].trim())?,
                    parse_num(key, parts[2].trim())?,
                );
            }
            "strip_unlabeled" => self.strip_unlabeled = parse_num(key, value)?,
            "sweep_full_grid" => self.sweep_full_grid = parse_bool(key, value)?,
            "synth_parents" => self.synth.parents = parse_num(key, value)?,
            "synth_children_per_parent" => self.synth.children_per_parent = parse_num(key, value)?,
            "synth_queries_per_child" => self.synth.queries_per_child = parse_num(key, value)?,
            "synth_imbalance" => self.synth.imbalance = parse_num(key, value)?,
            "synth_typo_rate" => self.synth.typo_rate = parse_num(key, value)?,
            "synth_unlabeled_fraction" => self.synth.unlabeled_fraction = parse_num(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies the `--seed` override everywhere a seed is consumed.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
        self.echo.insert("seed".to_string(), seed.to_string());
    }
}

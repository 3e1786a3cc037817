use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{Vocab, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::fsio::read_text;
use crate::laplace::{KfacOptions, DEFAULT_COMPRESSION_BUDGET, DEFAULT_PRIOR_PRECISION, DEFAULT_WIDTH_THRESHOLD};
use crate::metrics::DEFAULT_BINS;
use crate::model::BackboneConfig;
use crate::predict::DEFAULT_SAMPLES;
use crate::train::{LoraConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Method {
    Single,
    Ensemble,
    Bayesian,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Single, Method::Ensemble, Method::Bayesian];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Ensemble => "ensemble",
            Method::Bayesian => "bayesian",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" => Ok(Method::Single),
            "ensemble" => Ok(Method::Ensemble),
            "bayesian" | "bayes" | "laplace" => Ok(Method::Bayesian),
            other => Err(Error::invalid(format!(
                "unknown method {other:?} (single, ensemble, bayesian)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DatasetSpec {
    Synthetic {
        n_proteins: usize,
        n_pairs: usize,
        latent_dim: usize,
        seed: u64,
    },
    Tsv(PathBuf),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_proteins: 200,
            n_pairs: 2000,
            latent_dim: 2,
            seed: 0,
        }
    }
}

/// Everything that determines an experiment's results, plus the output root.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub max_len: usize,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub method: Method,
    pub lora: LoraConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` ties weight decay to the prior: λ/2.
    pub weight_decay: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ensemble_size: usize,
    pub prior_precision: f64,
    pub compression_budget: Option<usize>,
    pub width_threshold: usize,
    pub samples: usize,
    pub bins: usize,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: DatasetSpec::default(),
            train_fraction: 0.8,
            split_seed: 0,
            max_len: DEFAULT_MAX_LEN,
            backbone: BackboneConfig::default(),
            backbone_seed: 0,
            method: Method::Single,
            lora: LoraConfig::default(),
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            weight_decay: None,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            ensemble_size: crate::ensemble::DEFAULT_MEMBERS,
            prior_precision: DEFAULT_PRIOR_PRECISION,
            compression_budget: Some(DEFAULT_COMPRESSION_BUDGET),
            width_threshold: DEFAULT_WIDTH_THRESHOLD,
            samples: DEFAULT_SAMPLES,
            bins: DEFAULT_BINS,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every settable key, as `section.key`.
pub const CONFIG_KEYS: &[&str] = &[
    "data.n_proteins",
    "data.n_pairs",
    "data.latent_dim",
    "data.seed",
    "data.tsv",
    "data.train_fraction",
    "data.split_seed",
    "data.max_len",
    "model.vocab_size",
    "model.embed_dim",
    "model.num_heads",
    "model.num_layers",
    "model.backbone_seed",
    "model.rank",
    "model.alpha",
    "model.dropout",
    "train.learning_rate",
    "train.epochs",
    "train.batch_size",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "ensemble.members",
    "laplace.prior_precision",
    "laplace.compression_budget",
    "laplace.width_threshold",
    "eval.samples",
    "eval.bins",
    "run.method",
    "run.seeds",
    "run.out_dir",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num("seeds", s))
        .collect()
}

impl RunConfig {
    /// Sets one `section.key` value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let synth = |cfg: &mut RunConfig| -> (usize, usize, usize, u64) {
            match &cfg.dataset {
                DatasetSpec::Synthetic {
                    n_proteins,
                    n_pairs,
                    latent_dim,
                    seed,
                } => (*n_proteins, *n_pairs, *latent_dim, *seed),
                DatasetSpec::Tsv(_) => match DatasetSpec::default() {
                    DatasetSpec::Synthetic {
                        n_proteins,
                        n_pairs,
                        latent_dim,
                        seed,
                    } => (n_proteins, n_pairs, latent_dim, seed),
                    DatasetSpec::Tsv(_) => unreachable!("default dataset is synthetic"),
                },
            }
        };
        let set_synth = |cfg: &mut RunConfig, (n_proteins, n_pairs, latent_dim, seed)| {
            cfg.dataset = DatasetSpec::Synthetic {
                n_proteins,
                n_pairs,
                latent_dim,
                seed,
            };
        };
        match key {
            "data.n_proteins" => {
                let mut s = synth(self);
                s.0 = parse_num(key, value)?;
                set_synth(self, s);
            }
            "data.n_pairs" => {
                let mut s = synth(self);
                s.1 = parse_num(key, value)?;
                set_synth(self, s);
            }
            "data.latent_dim" => {
                let mut s = synth(self);
                s.2 = parse_num(key, value)?;
                set_synth(self, s);
            }
            "data.seed" => {
                let mut s = synth(self);
                s.3 = parse_num(key, value)?;
                set_synth(self, s);
            }
            "data.tsv" => self.dataset = DatasetSpec::Tsv(PathBuf::from(value)),
            "data.train_fraction" => self.train_fraction = parse_num(key, value)?,
            "data.split_seed" => self.split_seed = parse_num(key, value)?,
            "data.max_len" => self.max_len = parse_num(key, value)?,
            "model.vocab_size" => self.backbone.vocab_size = parse_num(key, value)?,
            "model.embed_dim" => {
                self.backbone.embed_dim = parse_num(key, value)?;
                self.backbone.ffn_dim = 4 * self.backbone.embed_dim;
            }
            "model.num_heads" => self.backbone.num_heads = parse_num(key, value)?,
            "model.num_layers" => self.backbone.num_layers = parse_num(key, value)?,
            "model.backbone_seed" => self.backbone_seed = parse_num(key, value)?,
            "model.rank" => self.lora.rank = parse_num(key, value)?,
            "model.alpha" => self.lora.alpha = parse_num(key, value)?,
            "model.dropout" => self.lora.dropout = parse_num(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.weight_decay" => {
                self.weight_decay = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "train.beta1" => self.beta1 = parse_num(key, value)?,
            "train.beta2" => self.beta2 = parse_num(key, value)?,
            "train.epsilon" => self.epsilon = parse_num(key, value)?,
            "ensemble.members" => self.ensemble_size = parse_num(key, value)?,
            "laplace.prior_precision" => self.prior_precision = parse_num(key, value)?,
            "laplace.compression_budget" => {
                self.compression_budget = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "laplace.width_threshold" => self.width_threshold = parse_num(key, value)?,
            "eval.samples" => self.samples = parse_num(key, value)?,
            "eval.bins" => self.bins = parse_num(key, value)?,
            "run.method" => self.method = value.parse()?,
            "run.seeds" => self.seeds = parse_seed_list(value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text with optional `[section]` headers;
    /// keys outside a section must be written as `section.key`.
    pub fn apply_text(&mut self, text: &str, path: Option<&Path>) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Validation {
                path: path.map(Path::to_path_buf),
                line: i + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&read_text(path)?, Some(path))?;
        Ok(cfg)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            max_seq_len: self.max_len,
            ..self.backbone.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay.unwrap_or(self.prior_precision / 2.0),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: 0,
        }
    }

    pub fn kfac_options(&self) -> KfacOptions {
        KfacOptions {
            compression_budget: self.compression_budget,
            width_threshold: self.width_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.train_config().validate()?;
        let vocab = Vocab::default().len();
        if self.backbone.vocab_size < vocab {
            return Err(Error::invalid(format!(
                "vocab_size {} is smaller than the {vocab}-token character vocabulary",
                self.backbone.vocab_size
            )));
        }
        let d = self.backbone.embed_dim;
        if self.lora.rank == 0 || 2 * self.lora.rank > d {
            return Err(Error::invalid(format!(
                "rank {} outside [1, {}]",
                self.lora.rank,
                d / 2
            )));
        }
        if !(0.0..1.0).contains(&self.lora.dropout) || self.lora.alpha.is_nan() || self.lora.alpha < 0.0 {
            return Err(Error::invalid("alpha must be non-negative and dropout in [0, 1)"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie strictly between 0 and 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::invalid(format!("seed {s} listed twice")));
            }
        }
        if self.bins == 0 {
            return Err(Error::invalid("bins must be at least 1"));
        }
        match self.method {
            Method::Ensemble if self.ensemble_size == 0 => {
                return Err(Error::invalid("ensemble size must be at least 1"));
            }
            Method::Bayesian if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) => {
                return Err(Error::invalid("prior precision must be positive"));
            }
            Method::Bayesian if self.samples == 0 => {
                return Err(Error::invalid("predictive sample count must be at least 1"));
            }
            _ => {}
        }
        if self.compression_budget == Some(0) {
            return Err(Error::invalid("compression budget must be at least 1 (or none)"));
        }
        Ok(())
    }

    /// SHA-256 over every result-affecting field (and the bytes of a TSV
    /// dataset), hex-encoded; the output directory is excluded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        let json = serde_json::to_string(self).map_err(|e| Error::computation(e.to_string()))?;
        h.update(json.as_bytes());
        if let DatasetSpec::Tsv(path) = &self.dataset {
            h.update(read_text(path)?.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn short_hash(&self) -> Result<String> {
        Ok(self.hash()?[..16].to_string())
    }

    /// `section.key = value` dump that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        match &self.dataset {
            DatasetSpec::Synthetic {
                n_proteins,
                n_pairs,
                latent_dim,
                seed,
            } => {
                line("data.n_proteins", n_proteins.to_string());
                line("data.n_pairs", n_pairs.to_string());
                line("data.latent_dim", latent_dim.to_string());
                line("data.seed", seed.to_string());
            }
            DatasetSpec::Tsv(p) => line("data.tsv", p.display().to_string()),
        }
        line("data.train_fraction", self.train_fraction.to_string());
        line("data.split_seed", self.split_seed.to_string());
        line("data.max_len", self.max_len.to_string());
        line("model.vocab_size", self.backbone.vocab_size.to_string());
        line("model.embed_dim", self.backbone.embed_dim.to_string());
        line("model.num_heads", self.backbone.num_heads.to_string());
        line("model.num_layers", self.backbone.num_layers.to_string());
        line("model.backbone_seed", self.backbone_seed.to_string());
        line("model.rank", self.lora.rank.to_string());
        line("model.alpha", self.lora.alpha.to_string());
        line("model.dropout", self.lora.dropout.to_string());
        line("train.learning_rate", self.learning_rate.to_string());
        line("train.epochs", self.epochs.to_string());
        line("train.batch_size", self.batch_size.to_string());
        line(
            "train.weight_decay",
            self.weight_decay.map_or("auto".to_string(), |w| w.to_string()),
        );
        line("train.beta1", self.beta1.to_string());
        line("train.beta2", self.beta2.to_string());
        line("train.epsilon", self.epsilon.to_string());
        line("ensemble.members", self.ensemble_size.to_string());
        line("laplace.prior_precision", self.prior_precision.to_string());
        line(
            "laplace.compression_budget",
            self.compression_budget.map_or("none".to_string(), |b| b.to_string()),
        );
        line("laplace.width_threshold", self.width_threshold.to_string());
        line("eval.samples", self.samples.to_string());
        line("eval.bins", self.bins.to_string());
        line("run.method", self.method.to_string());
        line(
            "run.seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_experiment_matrix() {
        let c = RunConfig::default();
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(c.ensemble_size, 3);
        assert_eq!(c.prior_precision, 0.1);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.epochs, 4);
        assert_eq!((c.lora.alpha, c.lora.dropout, c.lora.rank), (32.0, 0.05, 8));
        assert_eq!((c.bins, c.train_fraction, c.max_len), (15, 0.8, 50));
        assert_eq!(c.train_config().weight_decay, 0.05);
        c.validate().unwrap();
    }

    #[test]
    fn config_text_with_sections() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# experiment\n[model]\nrank = 4\n[train]\nepochs = 2 # short\nrun.method = bayesian\n[run]\nseeds = 3,4\n",
            None,
        )
        .unwrap();
        assert_eq!(c.lora.rank, 4);
        assert_eq!(c.epochs, 2);
        assert_eq!(c.method, Method::Bayesian);
        assert_eq!(c.seeds, vec![3, 4]);
        let err = RunConfig::default()
            .apply_text("[model]\nrank = 4\nbogus = 1\n", None)
            .unwrap_err();
        assert!(matches!(err, Error::Validation { line: 3, .. }));
    }

    #[test]
    fn text_round_trip_preserves_hash() {
        let mut c = RunConfig::default();
        c.set("model.rank", "16").unwrap();
        c.set("model.embed_dim", "64").unwrap();
        c.set("train.weight_decay", "0.01").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), None).unwrap();
        assert_eq!(
            back,
            RunConfig {
                out_dir: back.out_dir.clone(),
                ..c.clone()
            }
        );
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_tracks_result_fields_only() {
        let base = RunConfig::default();
        let h = base.hash().unwrap();
        for (k, v) in [
            ("model.rank", "4"),
            ("train.learning_rate", "0.001"),
            ("run.seeds", "0,1"),
            ("data.seed", "9"),
            ("eval.samples", "50"),
            ("laplace.prior_precision", "1"),
        ] {
            let mut c = base.clone();
            c.set(k, v).unwrap();
            assert_ne!(c.hash().unwrap(), h, "{k}");
        }
        let mut moved = base.clone();
        moved.set("run.out_dir", "elsewhere").unwrap();
        assert_eq!(moved.hash().unwrap(), h);
    }

    #[test]
    fn validation_rules() {
        let c = RunConfig {
            seeds: vec![1, 1],
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.lora.rank = 32;
        assert!(c.validate().is_err());
        c.set("model.embed_dim", "64").unwrap();
        c.validate().unwrap();
        let c = RunConfig {
            method: Method::Bayesian,
            samples: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

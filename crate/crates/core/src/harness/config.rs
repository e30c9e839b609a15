//! Flat-text experiment configuration.
//!
//! Configs are `key = value` lines (with `#` comments). Every knob has a
//! working default, so a config file only states deviations. The canonical
//! serialization sorts keys and prints one per line; its SHA-256 — taken
//! *without* the run seed — identifies an experimental condition, so runs
//! that differ only by seed share a hash and aggregate together.

use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::isa::{IsaConfig, IsaMode, PretrainConfig};
use crate::masking::{MaskApplication, MaskPolicy};
use crate::stream::StreamConfig;
use crate::Result;

/// Shape of one synthetic Gaussian-cluster dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Minimum pairwise distance between class centroids.
    pub margin: f64,
    /// Standard deviation of samples around their centroid.
    pub noise: f64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.features == 0 || self.train_per_class == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs at least one class, feature, and training sample".into(),
            ));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::InvalidConfig(format!("bad margin {}", self.margin)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::InvalidConfig(format!("bad noise {}", self.noise)));
        }
        Ok(())
    }
}

/// Transformer dimensions plus prompt length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub token_len: usize,
    pub prompt_len: usize,
}

/// Everything one experiment needs. The same struct drives single runs and
/// sweep arms; sweeps copy it and move exactly one knob.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub dataset: SyntheticDatasetSpec,
    /// When set, the streaming corpus is read from this delimited text file
    /// (`label,f1,...,fd` per line) instead of being synthesized; it must
    /// match `dataset.classes`/`dataset.features` and is split 80/20 per
    /// class. Pretraining stays synthetic either way.
    pub external_data: Option<String>,
    /// Pretraining corpus: its own classes and size, sharing the feature
    /// dimension, margin, and noise of the stream dataset but laid out
    /// independently.
    pub pretrain_classes: usize,
    pub pretrain_train_per_class: usize,
    pub pretrain: PretrainConfig,
    pub model: ModelSpec,
    pub stream: StreamConfig,
    pub mask_policy: MaskPolicy,
    pub mask_application: MaskApplication,
    pub isa: IsaConfig,
    /// Adam learning rate for the streaming phase (prompts + head).
    pub gcl_learning_rate: f64,
    pub buffer_capacity: usize,
    /// Replay examples drawn per training step (bounded by buffer content).
    pub replay_size: usize,
    /// Anytime evaluation cadence, in training samples.
    pub eval_period_samples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: SyntheticDatasetSpec {
                classes: 20,
                features: 16,
                // 32 train / 8 test keeps the default split at 80/20.
                train_per_class: 32,
                test_per_class: 8,
                margin: 1.0,
                noise: 0.15,
            },
            external_data: None,
            pretrain_classes: 8,
            pretrain_train_per_class: 40,
            pretrain: PretrainConfig {
                epochs: 12,
                batch_size: 32,
                learning_rate: 0.005,
                min_train_accuracy: 0.8,
                seed: 0,
            },
            model: ModelSpec { embed_dim: 16, depth: 1, heads: 2, token_len: 4, prompt_len: 4 },
            stream: StreamConfig::default(),
            mask_policy: MaskPolicy::Batch,
            mask_application: MaskApplication::Exclude,
            isa: IsaConfig {
                mode: IsaMode::Fam,
                epochs: 3,
                batch_size: 32,
                // Tuned jointly with rho and noise_strength so the warm-up
                // ablation separates cleanly at this corpus scale.
                learning_rate: 0.01,
                rho: 0.05,
                ood_fraction: 0.15,
                noise_strength: 0.4,
                prompt_len: 4,
                seed: 0,
            },
            gcl_learning_rate: 0.01,
            buffer_capacity: 0,
            replay_size: 16,
            eval_period_samples: 160,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses overrides on top of the defaults. Lines are `key = value`;
    /// `#` starts a comment; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ConfigParse {
                    line,
                    reason: format!("expected `key = value`, got {content:?}"),
                });
            };
            config
                .apply(key.trim(), value.trim())
                .map_err(|reason| Error::ConfigParse { line, reason })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.pretrain_classes == 0 || self.pretrain_train_per_class == 0 {
            return Err(Error::InvalidConfig("pretraining corpus must be non-empty".into()));
        }
        self.pretrain.validate()?;
        self.stream.validate()?;
        self.isa.validate()?;
        if !self.gcl_learning_rate.is_finite() || self.gcl_learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gcl.learning_rate must be positive, got {}",
                self.gcl_learning_rate
            )));
        }
        if self.eval_period_samples == 0 {
            return Err(Error::InvalidConfig("eval.period_samples must be positive".into()));
        }
        if self.model.prompt_len != self.isa.prompt_len {
            return Err(Error::InvalidConfig(
                "model.prompt_len is the single prompt-length knob".into(),
            ));
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str, key: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| format!("{key}: {e}"))
        }
        match key {
            "buffer.capacity" => self.buffer_capacity = num(value, key)?,
            "buffer.replay_size" => self.replay_size = num(value, key)?,
            "dataset.classes" => self.dataset.classes = num(value, key)?,
            "dataset.external_path" => {
                self.external_data =
                    if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "dataset.features" => self.dataset.features = num(value, key)?,
            "dataset.margin" => self.dataset.margin = num(value, key)?,
            "dataset.noise" => self.dataset.noise = num(value, key)?,
            "dataset.test_per_class" => self.dataset.test_per_class = num(value, key)?,
            "dataset.train_per_class" => self.dataset.train_per_class = num(value, key)?,
            "eval.period_samples" => self.eval_period_samples = num(value, key)?,
            "gcl.learning_rate" => self.gcl_learning_rate = num(value, key)?,
            "isa.batch_size" => self.isa.batch_size = num(value, key)?,
            "isa.epochs" => self.isa.epochs = num(value, key)?,
            "isa.learning_rate" => self.isa.learning_rate = num(value, key)?,
            "isa.mode" => self.isa.mode = value.parse().map_err(|e| format!("{e}"))?,
            "isa.noise_strength" => self.isa.noise_strength = num(value, key)?,
            "isa.ood_fraction" => self.isa.ood_fraction = num(value, key)?,
            "isa.rho" => self.isa.rho = num(value, key)?,
            "mask.application" => {
                self.mask_application = value.parse().map_err(|e| format!("{e}"))?
            }
            "mask.policy" => self.mask_policy = value.parse().map_err(|e| format!("{e}"))?,
            "model.depth" => self.model.depth = num(value, key)?,
            "model.embed_dim" => self.model.embed_dim = num(value, key)?,
            "model.heads" => self.model.heads = num(value, key)?,
            "model.prompt_len" => {
                self.model.prompt_len = num(value, key)?;
                self.isa.prompt_len = self.model.prompt_len;
            }
            "model.token_len" => self.model.token_len = num(value, key)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(value, key)?,
            "pretrain.classes" => self.pretrain_classes = num(value, key)?,
            "pretrain.epochs" => self.pretrain.epochs = num(value, key)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = num(value, key)?,
            "pretrain.min_accuracy" => self.pretrain.min_train_accuracy = num(value, key)?,
            "pretrain.train_per_class" => self.pretrain_train_per_class = num(value, key)?,
            "run.seed" => self.seed = num(value, key)?,
            "stream.batch_size" => self.stream.batch_size = num(value, key)?,
            "stream.blurry_ratio" => self.stream.blurry_ratio = num(value, key)?,
            "stream.disjoint_ratio" => self.stream.disjoint_ratio = num(value, key)?,
            "stream.sessions" => self.stream.sessions = num(value, key)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Sorted `(key, value)` pairs covering every knob.
    pub fn canonical_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("buffer.capacity", self.buffer_capacity.to_string()),
            ("buffer.replay_size", self.replay_size.to_string()),
            ("dataset.classes", self.dataset.classes.to_string()),
            ("dataset.external_path", self.external_data.clone().unwrap_or_default()),
            ("dataset.features", self.dataset.features.to_string()),
            ("dataset.margin", self.dataset.margin.to_string()),
            ("dataset.noise", self.dataset.noise.to_string()),
            ("dataset.test_per_class", self.dataset.test_per_class.to_string()),
            ("dataset.train_per_class", self.dataset.train_per_class.to_string()),
            ("eval.period_samples", self.eval_period_samples.to_string()),
            ("gcl.learning_rate", self.gcl_learning_rate.to_string()),
            ("isa.batch_size", self.isa.batch_size.to_string()),
            ("isa.epochs", self.isa.epochs.to_string()),
            ("isa.learning_rate", self.isa.learning_rate.to_string()),
            ("isa.mode", self.isa.mode.to_string()),
            ("isa.noise_strength", self.isa.noise_strength.to_string()),
            ("isa.ood_fraction", self.isa.ood_fraction.to_string()),
            ("isa.rho", self.isa.rho.to_string()),
            ("mask.application", mask_application_str(self.mask_application).to_string()),
            ("mask.policy", self.mask_policy.as_str().to_string()),
            ("model.depth", self.model.depth.to_string()),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.prompt_len", self.model.prompt_len.to_string()),
            ("model.token_len", self.model.token_len.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.classes", self.pretrain_classes.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.learning_rate", self.pretrain.learning_rate.to_string()),
            ("pretrain.min_accuracy", self.pretrain.min_train_accuracy.to_string()),
            ("pretrain.train_per_class", self.pretrain_train_per_class.to_string()),
            ("run.seed", self.seed.to_string()),
            ("stream.batch_size", self.stream.batch_size.to_string()),
            ("stream.blurry_ratio", self.stream.blurry_ratio.to_string()),
            ("stream.disjoint_ratio", self.stream.disjoint_ratio.to_string()),
            ("stream.sessions", self.stream.sessions.to_string()),
        ]
    }

    /// One `key = value` line per knob, sorted.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.canonical_pairs() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Condition identity: SHA-256 of the canonical pairs minus the run
    /// seed, hex-encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            if k == "run.seed" {
                continue;
            }
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Keys whose values differ between two configs (run seed included).
    pub fn diff(&self, other: &ExperimentConfig) -> Vec<&'static str> {
        self.canonical_pairs()
            .into_iter()
            .zip(other.canonical_pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, _), _)| k)
            .collect()
    }
}

fn mask_application_str(a: MaskApplication) -> &'static str {
    match a {
        MaskApplication::Exclude => "exclude",
        MaskApplication::Multiply => "multiply",
    }
}
